//! Optimisation loops, metrics and checkpoints.
//!
//! Each mini-batch is processed sample by sample on independent tapes in
//! parallel; per-sample gradients are then summed in sample order, so results
//! do not depend on the number of threads.

mod adam;
mod checkpoint;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ParamId, Tape, Tensor, TensorError};
use crate::model::{Forecaster, Mode, ModelError};
use crate::rng::{derive_seed, mix_seed, stream_rng};
use crate::synth::WindowedSample;

pub use adam::{Adam, AdamConfig, Moments};
pub use checkpoint::{
    load_checkpoint, read_checkpoint_manifest, save_checkpoint, CheckpointError,
    CheckpointManifest, OptimizerEntry, TensorEntry, CHECKPOINT_FORMAT_VERSION,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("the {0} split is empty")]
    EmptySplit(&'static str),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged in epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub dropout: f64,
    pub base_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Rescales the batch gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            dropout: 0.1,
            base_epochs: 50,
            finetune_epochs: 50,
            batch_size: 32,
            seed: 0,
            adam: AdamConfig::default(),
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate {} must be finite and >= 0",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive".into());
        }
        Ok(())
    }
}

/// Mean squared error over all elements.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64, TensorError> {
    check_same(pred, target)?;
    let n = pred.numel() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n)
}

/// Mean absolute error over all elements.
pub fn mae(pred: &Tensor, target: &Tensor) -> Result<f64, TensorError> {
    check_same(pred, target)?;
    let n = pred.numel() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "metric",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub mse: f64,
}

/// Evaluation-mode MAE and MSE over every element of every sample.
pub fn evaluate(model: &dyn Forecaster, samples: &[WindowedSample]) -> Result<Metrics, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let sums: Vec<(f64, f64, usize)> = samples
        .par_iter()
        .map(|s| {
            let pred = model.predict(s)?;
            check_same(&pred, &s.x_future)?;
            let (mut abs, mut sq) = (0.0, 0.0);
            for (a, b) in pred.data().iter().zip(s.x_future.data()) {
                abs += (a - b).abs();
                sq += (a - b).powi(2);
            }
            Ok((abs, sq, pred.numel()))
        })
        .collect::<Result<_, TrainError>>()?;
    let (abs, sq, n) = sums.iter().fold((0.0, 0.0, 0), |acc, s| {
        (acc.0 + s.0, acc.1 + s.1, acc.2 + s.2)
    });
    Ok(Metrics {
        mae: abs / n as f64,
        mse: sq / n as f64,
    })
}

/// Metrics of one split as written to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub split: String,
    pub method: String,
    pub mae: f64,
    pub mse: f64,
}

/// Losses after an epoch; epoch 0 is the state before any update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training-mode batch loss, or the evaluation-mode loss for epoch 0.
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were restored at the end.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub optimizer: Adam,
}

/// Loss history as CSV with header `epoch,train_loss,val_loss`.
pub fn history_to_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for r in history {
        out.push_str(&format!(
            "{},{:.16e},{:.16e}\n",
            r.epoch, r.train_loss, r.val_loss
        ));
    }
    out
}

/// Trains every trainable parameter of `model` with Adam on the MSE loss for
/// `epochs` epochs, then restores the parameters with the lowest validation
/// loss (the untrained state included). `phase` separates the random streams
/// of different training runs that share a seed.
pub fn fit(
    model: &mut dyn Forecaster,
    train: &[WindowedSample],
    val: &[WindowedSample],
    cfg: &TrainConfig,
    epochs: usize,
    phase: &str,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }
    let seed = derive_seed(cfg.seed, phase);
    let mut optimizer = Adam::new(model.store(), cfg.adam);
    let trainable = model.store().trainable_ids();
    let snapshot = |m: &dyn Forecaster| -> Vec<Tensor> {
        trainable
            .iter()
            .map(|&id| m.store().value(id).clone())
            .collect()
    };

    let initial_val = evaluate(model, val)?.mse;
    let initial_train = evaluate(model, train)?.mse;
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_loss: initial_train,
        val_loss: initial_val,
    }];
    log::info!("{phase} epoch 0: train {initial_train:.6} val {initial_val:.6}");
    let mut best = (0, initial_val, snapshot(model));

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=epochs {
        order.shuffle(&mut stream_rng(seed, epoch as u64));
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let batch_seed = mix_seed(&[seed, epoch as u64, b as u64]);
            let (loss, grads) = batch_gradient(model, train, batch, cfg.dropout, batch_seed)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, loss });
            }
            loss_sum += loss * batch.len() as f64;
            let grads = clip(grads, cfg.grad_clip);
            optimizer.update(model.store_mut(), &grads, cfg.learning_rate);
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_loss = evaluate(model, val)?.mse;
        if !val_loss.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                loss: val_loss,
            });
        }
        log::info!("{phase} epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best.1 {
            best = (epoch, val_loss, snapshot(model));
        }
    }
    let (best_epoch, best_val_loss, values) = best;
    for (&id, value) in trainable.iter().zip(values) {
        model.store_mut().set_value(id, value);
    }
    log::info!("{phase}: restored epoch {best_epoch} (val {best_val_loss:.6})");
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_loss,
        optimizer,
    })
}

/// Mean loss and mean gradient over the batch.
fn batch_gradient(
    model: &dyn Forecaster,
    data: &[WindowedSample],
    batch: &[usize],
    dropout: f64,
    batch_seed: u64,
) -> Result<(f64, BTreeMap<ParamId, Vec<f64>>), TrainError> {
    type SampleGrad = (f64, Vec<(ParamId, Vec<f64>)>);
    let per_sample: Vec<SampleGrad> = batch
        .par_iter()
        .enumerate()
        .map(|(pos, &i)| {
            let sample = &data[i];
            let mut rng = stream_rng(batch_seed, pos as u64);
            let mut tape = Tape::new();
            let pred = model.forward(&mut tape, sample, &mut Mode::train(dropout, &mut rng))?;
            let target = tape.constant(sample.x_future.clone());
            let loss = tape.mse(pred, target)?;
            tape.backward(loss)?;
            let grads = tape
                .param_grads()
                .into_iter()
                .map(|(id, g)| (id, g.to_vec()))
                .collect();
            Ok((tape.value(loss).data()[0], grads))
        })
        .collect::<Result<_, TrainError>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut total: BTreeMap<ParamId, Vec<f64>> = BTreeMap::new();
    let mut loss = 0.0;
    for (l, grads) in per_sample {
        loss += l;
        for (id, g) in grads {
            let acc = total.entry(id).or_insert_with(|| vec![0.0; g.len()]);
            acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b * scale);
        }
    }
    Ok((loss * scale, total))
}

fn clip(
    mut grads: BTreeMap<ParamId, Vec<f64>>,
    max_norm: Option<f64>,
) -> BTreeMap<ParamId, Vec<f64>> {
    if let Some(max_norm) = max_norm {
        let norm = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if norm > max_norm {
            let s = max_norm / norm;
            grads.values_mut().flatten().for_each(|g| *g *= s);
        }
    }
    grads
}

/// Pre-trains a context-agnostic model for `cfg.base_epochs`.
pub fn train_base(
    model: &mut crate::model::BaseForecaster,
    train: &[WindowedSample],
    val: &[WindowedSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    fit(model, train, val, cfg, cfg.base_epochs, "base")
}

/// Fine-tunes the trainable part of an attached context model for
/// `cfg.finetune_epochs`; frozen base parameters are never updated.
pub fn finetune_context(
    model: &mut crate::model::ContextFormerModel,
    train: &[WindowedSample],
    val: &[WindowedSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    fit(model, train, val, cfg, cfg.finetune_epochs, "finetune")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        let p = Tensor::vector(vec![0.0, 0.0]).unwrap();
        let t = Tensor::vector(vec![1.0, 3.0]).unwrap();
        assert_eq!(mse(&p, &t).unwrap(), 5.0);
        assert_eq!(mae(&p, &t).unwrap(), 2.0);
        assert_eq!(mse(&t, &t).unwrap(), 0.0);
        assert_eq!(mae(&t, &t).unwrap(), 0.0);
        assert!(mse(&p, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn clipping_caps_global_norm() {
        let g = BTreeMap::from([(ParamId(0), vec![3.0]), (ParamId(1), vec![4.0])]);
        let c = clip(g.clone(), Some(1.0));
        assert!((c[&ParamId(0)][0] - 0.6).abs() < 1e-15);
        assert!((c[&ParamId(1)][0] - 0.8).abs() < 1e-15);
        assert_eq!(clip(g.clone(), Some(10.0)), g);
        assert_eq!(clip(g.clone(), None), g);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            learning_rate: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn history_csv_layout() {
        let csv = history_to_csv(&[EpochRecord {
            epoch: 0,
            train_loss: 1.0,
            val_loss: 0.5,
        }]);
        assert_eq!(
            csv,
            "epoch,train_loss,val_loss\n0,1.0000000000000000e0,5.0000000000000000e-1\n"
        );
    }
}
