//! Synthetic data generation, windowing, normalisation and the dataset file
//! format.

mod arma;
mod dataset;
mod generate;
mod io;

use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::TensorError;

pub use arma::{is_stable, sample_arma, ArmaSpec, BURN_IN};
pub use dataset::{
    denormalize, normalize, sliding_windows, split_sizes, DatasetInfo, DatasetSplit,
    MetadataSchema, NormStats, Sequence, SequenceSplit, WindowedSample, STD_FLOOR,
};
pub use generate::{
    arma_sequence, gen_arma_dataset, gen_arma_sequences, gen_latent_ar_dataset, sample_stable_ar,
    ArmaDatasetConfig, LatentArConfig, LatentArSequence,
};
pub use io::{dataset_files, read_dataset, read_manifest, write_dataset, SplitManifest, SPLITS};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator configuration: {0}")]
    InvalidConfig(String),
    #[error("ARMA spec is not stationary and invertible: {0:?}")]
    UnstableSpec(ArmaSpec),
    #[error("window of length {window} does not fit a series of length {len}")]
    WindowTooLong { window: usize, len: usize },
    #[error("metadata error: {0}")]
    Metadata(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("split is already normalised")]
    AlreadyNormalized,
    #[error("split is not normalised")]
    NotNormalized,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
