//! The two synthetic generators: ARMA(2,2) sequences whose true coefficients
//! serve as metadata, and AR(p) sequences driven by latent AR(1) contexts.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::arma::{is_stable, sample_arma, ArmaSpec, BURN_IN};
use super::dataset::{
    split_sizes, DatasetInfo, DatasetSplit, MetadataSchema, Sequence, SequenceSplit,
};
use super::SynthError;
use crate::autodiff::Tensor;
use crate::rng::stream_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArmaDatasetConfig {
    pub n_sequences: usize,
    /// Timesteps per sequence; the horizon is `length − lookback`.
    pub length: usize,
    pub lookback: usize,
    /// Variance of the Gaussian noise added to every emitted value.
    pub obs_noise_var: f64,
    /// Innovation variance of the ARMA recursion.
    pub innovation_var: f64,
    pub seed: u64,
}

impl Default for ArmaDatasetConfig {
    fn default() -> Self {
        Self {
            n_sequences: 10_000,
            length: 192,
            lookback: 96,
            obs_noise_var: 0.1,
            innovation_var: 1.0,
            seed: 0,
        }
    }
}

impl ArmaDatasetConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_sequences == 0 {
            return Err(SynthError::InvalidConfig(
                "n_sequences must be positive".into(),
            ));
        }
        if self.lookback == 0 || self.length <= self.lookback {
            return Err(SynthError::InvalidConfig(format!(
                "length {} must exceed lookback {} (and lookback must be positive)",
                self.length, self.lookback
            )));
        }
        if !(self.obs_noise_var >= 0.0 && self.obs_noise_var.is_finite()) {
            return Err(SynthError::InvalidConfig(
                "obs_noise_var must be >= 0".into(),
            ));
        }
        if !(self.innovation_var > 0.0 && self.innovation_var.is_finite()) {
            return Err(SynthError::InvalidConfig(
                "innovation_var must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// One ARMA sequence plus the spec it was drawn from.
pub fn arma_sequence(cfg: &ArmaDatasetConfig, index: usize) -> (Sequence, ArmaSpec) {
    let mut rng = stream_rng(cfg.seed, index as u64);
    let spec = ArmaSpec::sample_uniform(&mut rng, cfg.innovation_var);
    let mut values = sample_arma(&spec, cfg.length, &mut rng).expect("sampled spec is valid");
    if cfg.obs_noise_var > 0.0 {
        let noise = Normal::new(0.0, cfg.obs_noise_var.sqrt()).expect("validated variance");
        values.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    let coeffs = spec.coefficients();
    let metadata = (0..cfg.length).flat_map(|_| coeffs).collect();
    let seq = Sequence {
        values: Tensor::matrix(cfg.length, 1, values).expect("length > 0"),
        metadata: Some(Tensor::matrix(cfg.length, 4, metadata).expect("length > 0")),
        timestamps: None,
    };
    (seq, spec)
}

/// Raw ARMA(2,2) sequences split 7:1:2 by sequence index.
pub fn gen_arma_sequences(cfg: &ArmaDatasetConfig) -> Result<SequenceSplit, SynthError> {
    cfg.validate()?;
    let seqs: Vec<Sequence> = (0..cfg.n_sequences)
        .into_par_iter()
        .map(|i| arma_sequence(cfg, i).0)
        .collect();
    let (n_train, n_val, _) = split_sizes(cfg.n_sequences);
    let mut rest = seqs;
    let mut val_test = rest.split_off(n_train);
    let test = val_test.split_off(n_val);
    Ok(SequenceSplit {
        info: DatasetInfo {
            n_channels: 1,
            lookback: cfg.lookback,
            horizon: cfg.length - cfg.lookback,
            stride: cfg.length,
            length: cfg.length,
            schema: MetadataSchema::continuous(4),
            seed: cfg.seed,
        },
        train: rest,
        val: val_test,
        test,
    })
}

/// ARMA dataset as forecasting samples, one per sequence (not yet normalised).
pub fn gen_arma_dataset(cfg: &ArmaDatasetConfig) -> Result<DatasetSplit, SynthError> {
    gen_arma_sequences(cfg)?.windowed()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentArConfig {
    pub n_sequences: usize,
    pub length: usize,
    /// Order of the generating AR process.
    pub ar_order: usize,
    pub n_latents: usize,
    /// AR(1) coefficient of every latent context signal.
    pub latent_phi: f64,
    /// Variance of the additive perturbation ε.
    pub noise_var: f64,
    /// Standard deviation of the context weights γ (0 makes context useless).
    pub weight_scale: f64,
    pub seed: u64,
}

impl Default for LatentArConfig {
    fn default() -> Self {
        Self {
            n_sequences: 1000,
            length: 500,
            ar_order: 10,
            n_latents: 5,
            latent_phi: 0.8,
            noise_var: 0.25,
            weight_scale: 1.0,
            seed: 0,
        }
    }
}

impl LatentArConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_sequences == 0 || self.ar_order == 0 || self.length <= self.ar_order {
            return Err(SynthError::InvalidConfig(format!(
                "need n_sequences > 0 and length {} > ar_order {} > 0",
                self.length, self.ar_order
            )));
        }
        if !(self.latent_phi.abs() < 1.0) {
            return Err(SynthError::InvalidConfig(
                "latent_phi must lie in (-1, 1)".into(),
            ));
        }
        if !(self.noise_var >= 0.0 && self.weight_scale >= 0.0) {
            return Err(SynthError::InvalidConfig(
                "noise_var and weight_scale must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// One sequence of the latent-context AR dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentArSequence {
    pub y: Vec<f64>,
    /// `n_latents` rows, each a context signal of `length` values.
    pub latents: Vec<Vec<f64>>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

/// Stable AR(p) coefficients drawn from U(−1, 1)^p by rejection.
pub fn sample_stable_ar<R: Rng + ?Sized>(p: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let beta: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..=1.0)).collect();
        if is_stable(&beta) {
            return beta;
        }
    }
}

/// `y_t = Σᵢ βᵢ y_{t−i} + Σⱼ γⱼ c_{j,t} + ε_t` with AR(1) latents `c_j`.
pub fn gen_latent_ar_dataset(cfg: &LatentArConfig) -> Result<Vec<LatentArSequence>, SynthError> {
    cfg.validate()?;
    Ok((0..cfg.n_sequences)
        .into_par_iter()
        .map(|i| latent_ar_sequence(cfg, i))
        .collect())
}

fn latent_ar_sequence(cfg: &LatentArConfig, index: usize) -> LatentArSequence {
    let mut rng = stream_rng(cfg.seed, index as u64);
    let p = cfg.ar_order;
    let beta = sample_stable_ar(p, &mut rng);
    let gamma: Vec<f64> = (0..cfg.n_latents)
        .map(|_| cfg.weight_scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let eps_sd = cfg.noise_var.sqrt();
    let total = BURN_IN + cfg.length;
    let mut latents = vec![vec![0.0; total]; cfg.n_latents];
    let mut y = vec![0.0; total];
    for t in 0..total {
        for lat in latents.iter_mut() {
            let prev = if t > 0 { lat[t - 1] } else { 0.0 };
            lat[t] = cfg.latent_phi * prev + rng.sample::<f64, _>(StandardNormal);
        }
        let ar: f64 = (1..=p.min(t)).map(|i| beta[i - 1] * y[t - i]).sum();
        let ctx: f64 = gamma.iter().zip(&latents).map(|(g, c)| g * c[t]).sum();
        y[t] = ar + ctx + eps_sd * rng.sample::<f64, _>(StandardNormal);
    }
    LatentArSequence {
        y: y.split_off(BURN_IN),
        latents: latents
            .into_iter()
            .map(|mut c| c.split_off(BURN_IN))
            .collect(),
        beta,
        gamma,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arma(n: usize) -> ArmaDatasetConfig {
        ArmaDatasetConfig {
            n_sequences: n,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn smoke_config_splits_seven_one_two() {
        let ds = gen_arma_dataset(&small_arma(10)).unwrap();
        assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (7, 1, 2));
        let s = &ds.train[0];
        assert_eq!(s.x_hist.shape(), &[96, 1]);
        assert_eq!(s.x_future.shape(), &[96, 1]);
        let c = s.c_hist.as_ref().unwrap();
        assert_eq!(c.shape(), &[96, 4]);
        assert!(s.timestamps.is_none());
    }

    #[test]
    fn metadata_is_time_invariant_true_coefficients() {
        let cfg = small_arma(5);
        let ds = gen_arma_dataset(&cfg).unwrap();
        for (i, s) in ds.train.iter().enumerate() {
            let (_, spec) = arma_sequence(&cfg, i);
            let c = s.c_hist.as_ref().unwrap();
            for t in 0..c.rows() {
                assert_eq!(c.row(t), &spec.coefficients());
            }
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let a = gen_arma_dataset(&small_arma(20)).unwrap();
        let b = gen_arma_dataset(&small_arma(20)).unwrap();
        assert_eq!(a, b);
        let mut other = small_arma(20);
        other.seed += 1;
        assert_ne!(a, gen_arma_dataset(&other).unwrap());
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = small_arma(10);
        cfg.length = 96;
        assert!(gen_arma_dataset(&cfg).is_err());
        let cfg = LatentArConfig {
            length: 5,
            ..Default::default()
        };
        assert!(gen_latent_ar_dataset(&cfg).is_err());
    }

    #[test]
    fn latent_dataset_shapes_and_determinism() {
        let cfg = LatentArConfig {
            n_sequences: 4,
            ..Default::default()
        };
        let data = gen_latent_ar_dataset(&cfg).unwrap();
        assert_eq!(data.len(), 4);
        for s in &data {
            assert_eq!(s.y.len(), 500);
            assert_eq!(s.latents.len(), 5);
            assert!(s.latents.iter().all(|c| c.len() == 500));
            assert!(is_stable(&s.beta));
            assert!(s.y.iter().all(|v| v.is_finite()));
        }
        assert_eq!(data, gen_latent_ar_dataset(&cfg).unwrap());
    }

    #[test]
    fn zero_weight_scale_silences_context() {
        let cfg = LatentArConfig {
            n_sequences: 2,
            weight_scale: 0.0,
            ..Default::default()
        };
        let data = gen_latent_ar_dataset(&cfg).unwrap();
        assert!(data.iter().all(|s| s.gamma.iter().all(|&g| g == 0.0)));
    }
}
