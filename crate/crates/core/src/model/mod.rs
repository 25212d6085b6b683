//! Patch-based transformer forecaster and its context-aware extension.
//!
//! [`BaseForecaster`] sees only the history. [`ContextFormerModel`] wraps a
//! copy of a trained base: every base parameter except the output head is
//! frozen, and each encoder block gains cross-attention over a metadata
//! embedding (and optionally a timestamp embedding). All context pathways end
//! in zero-initialised projections, so a freshly attached model reproduces
//! the base forecast exactly.

mod base;
mod context;
mod layers;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ParamStore, Tape, Tensor, TensorError, Var};
use crate::synth::{MetadataSchema, WindowedSample};

pub use base::BaseForecaster;
pub use context::{decompose_timestamp, ContextFormerModel, TIME_FEATURES};
pub use layers::{positional_encoding, Mode};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("input shape mismatch: {0}")]
    Shape(String),
    #[error("sample has no metadata but the model expects {0} metadata columns")]
    MissingMetadata(usize),
    #[error("the model uses temporal embeddings but the sample has no timestamps")]
    MissingTimestamps,
    #[error("timestamp {0} cannot be decomposed")]
    BadTimestamp(i64),
    #[error("cannot attach context: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Architecture hyperparameters independent of the data geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchitectureConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub patch_len: usize,
    pub patch_stride: usize,
    pub ff_dim: usize,
    /// Self-attention layers inside each context embedding.
    pub embed_encoder_layers: usize,
    /// Adds the timestamp embedding and its cross-attention.
    pub use_temporal: bool,
    /// Standardises each input channel by its own lookback mean and standard
    /// deviation and maps the forecast back.
    pub instance_norm: bool,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_blocks: 2,
            n_heads: 4,
            patch_len: 16,
            patch_stride: 8,
            ff_dim: 64,
            embed_encoder_layers: 2,
            use_temporal: false,
            instance_norm: false,
        }
    }
}

impl ArchitectureConfig {
    /// Published full-scale setting.
    pub fn paper_scale() -> Self {
        Self {
            d_model: 256,
            n_blocks: 6,
            n_heads: 8,
            ff_dim: 256,
            ..Self::default()
        }
    }
}

/// Architecture plus the data geometry it is built for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: ArchitectureConfig,
    pub lookback: usize,
    pub horizon: usize,
    pub n_channels: usize,
    pub schema: MetadataSchema,
}

impl ModelConfig {
    pub fn n_patches(&self) -> usize {
        (self.lookback - self.arch.patch_len) / self.arch.patch_stride + 1
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let a = &self.arch;
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if a.d_model == 0 || a.n_heads == 0 || !a.d_model.is_multiple_of(a.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                a.d_model, a.n_heads
            ));
        }
        if a.patch_len == 0 || a.patch_stride == 0 || a.patch_len > self.lookback {
            return bad(format!(
                "patch_len {} / stride {} invalid for lookback {}",
                a.patch_len, a.patch_stride, self.lookback
            ));
        }
        if self.horizon == 0 || self.n_channels == 0 || a.ff_dim == 0 || a.n_blocks == 0 {
            return bad("horizon, channels, ff_dim and n_blocks must be positive".into());
        }
        Ok(())
    }
}

/// Anything that maps a sample to a `T × F` forecast on a tape.
pub trait Forecaster: Sync {
    fn config(&self) -> &ModelConfig;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;

    fn forward(
        &self,
        tape: &mut Tape,
        sample: &WindowedSample,
        mode: &mut Mode,
    ) -> Result<Var, ModelError>;

    /// Evaluation-mode forecast.
    fn predict(&self, sample: &WindowedSample) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, sample, &mut Mode::eval())?;
        Ok(tape.value(out).clone())
    }
}

/// Either kind of model, for code that handles both (checkpoints, the CLI).
#[derive(Clone, Debug)]
pub enum Model {
    Base(BaseForecaster),
    Context(ContextFormerModel),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Base(_) => "base",
            Model::Context(_) => "context",
        }
    }

    pub fn as_forecaster(&self) -> &dyn Forecaster {
        match self {
            Model::Base(m) => m,
            Model::Context(m) => m,
        }
    }

    pub fn as_forecaster_mut(&mut self) -> &mut dyn Forecaster {
        match self {
            Model::Base(m) => m,
            Model::Context(m) => m,
        }
    }
}
