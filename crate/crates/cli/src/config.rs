//! Experiment configuration file.
//!
//! ```json
//! {
//!   "seed": 0,
//!   "data": { "generator": "arma", "n_sequences": 2000 },
//!   "model": { "d_model": 64, "n_blocks": 2 },
//!   "train": { "learning_rate": 0.001, "base_epochs": 20 },
//!   "sweep": { "ar_order": 10, "max_context": 5, "context": "latent" },
//!   "output_dir": "runs/desk"
//! }
//! ```
//!
//! Every section except `data` may be omitted. Seeds live only at the top
//! level; per-stage seeds are derived from it.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use contextformer::linear::{ContextSource, SweepConfig};
use contextformer::model::ArchitectureConfig;
use contextformer::rng::derive_seed;
use contextformer::synth::{ArmaDatasetConfig, LatentArConfig};
use contextformer::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum DataConfig {
    Arma(ArmaDatasetConfig),
    LatentAr(LatentArConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub ar_order: usize,
    pub max_context: usize,
    pub context: ContextSource,
}

impl Default for SweepSection {
    fn default() -> Self {
        let d = SweepConfig::default();
        Self {
            ar_order: d.ar_order,
            max_context: d.max_context,
            context: d.context,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ArchitectureConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        for section in ["data", "train"] {
            if value.get(section).and_then(|s| s.get("seed")).is_some() {
                bail!("`{section}.seed` is not allowed; set the top-level `seed`");
            }
        }
        let cfg: Self = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        match &self.data {
            DataConfig::Arma(d) => d.validate()?,
            DataConfig::LatentAr(d) => d.validate()?,
        }
        self.train.validate()?;
        Ok(())
    }

    pub fn apply_overrides(&mut self, seed: Option<u64>) {
        if let Some(seed) = seed {
            self.seed = seed;
        }
    }

    pub fn arma(&self) -> Result<ArmaDatasetConfig> {
        match &self.data {
            DataConfig::Arma(d) => Ok(ArmaDatasetConfig {
                seed: derive_seed(self.seed, "data"),
                ..d.clone()
            }),
            DataConfig::LatentAr(_) => {
                bail!("this command needs `data.generator` = \"arma\"")
            }
        }
    }

    pub fn sweep_config(&self) -> Result<SweepConfig> {
        match &self.data {
            DataConfig::LatentAr(d) => Ok(SweepConfig {
                data: LatentArConfig {
                    seed: derive_seed(self.seed, "data"),
                    ..d.clone()
                },
                ar_order: self.sweep.ar_order,
                max_context: self.sweep.max_context,
                context: self.sweep.context,
            }),
            DataConfig::Arma(_) => bail!("ar-sweep needs `data.generator` = \"latent_ar\""),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, "train"),
            ..self.train.clone()
        }
    }

    pub fn model_seed(&self) -> u64 {
        derive_seed(self.seed, "model")
    }

    pub fn context_seed(&self) -> u64 {
        derive_seed(self.seed, "context")
    }
}
