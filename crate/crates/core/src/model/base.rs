use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::{stream_rng, Rng};
use crate::synth::WindowedSample;

use super::layers::{positional_encoding, EncoderLayerIds, Init, LinearIds, Mode, LN_EPS};
use super::{Forecaster, ModelConfig, ModelError};

/// Parameter handles of the base encoder. A context model holds the same
/// handles into its own copy of the store.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BaseIds {
    pub patch_embed: LinearIds,
    pub blocks: Vec<EncoderLayerIds>,
    pub head: LinearIds,
}

/// Per-block injection point: receives the hidden state entering block `b`.
pub(crate) type BlockHook<'h> =
    dyn FnMut(&mut Tape, usize, Var, &mut Mode) -> Result<Var, ModelError> + 'h;

impl BaseIds {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut Rng) -> Self {
        let a = &cfg.arch;
        let d = a.d_model;
        let patch_embed =
            LinearIds::new(store, "base.patch_embed", a.patch_len, d, Init::Xavier, rng);
        let blocks = (0..a.n_blocks)
            .map(|b| {
                EncoderLayerIds::new(
                    store,
                    &format!("base.block{b}"),
                    d,
                    a.n_heads,
                    a.ff_dim,
                    rng,
                )
            })
            .collect();
        let head = LinearIds::new(
            store,
            "base.head",
            cfg.n_patches() * d,
            cfg.horizon,
            Init::Xavier,
            rng,
        );
        Self {
            patch_embed,
            blocks,
            head,
        }
    }

    /// Forecast of shape `T × F`, each channel encoded independently with
    /// shared weights.
    pub fn forward(
        &self,
        cfg: &ModelConfig,
        store: &ParamStore,
        tape: &mut Tape,
        x_hist: &Tensor,
        mode: &mut Mode,
        hook: Option<&mut BlockHook>,
    ) -> Result<Var, ModelError> {
        let (l, f) = (cfg.lookback, cfg.n_channels);
        if x_hist.shape() != [l, f] {
            return Err(ModelError::Shape(format!(
                "x_hist {:?}, expected [{l}, {f}]",
                x_hist.shape()
            )));
        }
        let n_p = cfg.n_patches();
        let (plen, stride, d) = (cfg.arch.patch_len, cfg.arch.patch_stride, cfg.arch.d_model);
        let pe = tape.constant(positional_encoding(n_p, d));
        let mut hook = hook;
        let mut outputs = Vec::with_capacity(f);
        for ch in 0..f {
            let mut col = x_hist.column(ch);
            let (shift, spread) = if cfg.arch.instance_norm {
                let mean = col.iter().sum::<f64>() / l as f64;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / l as f64;
                let sd = (var + LN_EPS).sqrt();
                col.iter_mut().for_each(|v| *v = (*v - mean) / sd);
                (mean, sd)
            } else {
                (0.0, 1.0)
            };
            let patches: Vec<f64> = (0..n_p)
                .flat_map(|p| col[p * stride..p * stride + plen].iter().copied())
                .collect();
            let patches = tape.constant(Tensor::matrix(n_p, plen, patches)?);
            let h = self.patch_embed.forward(tape, store, patches)?;
            let h = tape.add(h, pe)?;
            let mut h = mode.drop(tape, h)?;
            for (b, block) in self.blocks.iter().enumerate() {
                if let Some(hook) = hook.as_deref_mut() {
                    h = hook(tape, b, h, mode)?;
                }
                h = block.forward(tape, store, h, mode)?;
            }
            let flat = tape.reshape(h, &[1, n_p * d])?;
            let mut y = self.head.forward(tape, store, flat)?;
            if cfg.arch.instance_norm {
                y = tape.scale(y, spread);
                let offset = tape.constant(Tensor::full(&[1, cfg.horizon], shift));
                y = tape.add(y, offset)?;
            }
            outputs.push(y);
        }
        let stacked = if f == 1 {
            outputs[0]
        } else {
            tape.concat(&outputs, 0)?
        };
        Ok(tape.transpose(stacked)?)
    }

    pub fn head_ids(&self) -> [ParamId; 2] {
        self.head.ids()
    }
}

/// Context-agnostic patch transformer.
#[derive(Clone, Debug)]
pub struct BaseForecaster {
    cfg: ModelConfig,
    store: ParamStore,
    pub(crate) ids: BaseIds,
}

impl BaseForecaster {
    /// Xavier-uniform weights and zero biases, drawn from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = stream_rng(seed, 0);
        let mut store = ParamStore::new();
        let ids = BaseIds::new(&cfg, &mut store, &mut rng);
        Ok(Self { cfg, store, ids })
    }

    pub fn n_patches(&self) -> usize {
        self.cfg.n_patches()
    }

    pub fn head_ids(&self) -> [ParamId; 2] {
        self.ids.head_ids()
    }
}

impl Forecaster for BaseForecaster {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(
        &self,
        tape: &mut Tape,
        sample: &WindowedSample,
        mode: &mut Mode,
    ) -> Result<Var, ModelError> {
        self.ids
            .forward(&self.cfg, &self.store, tape, &sample.x_hist, mode, None)
    }
}
