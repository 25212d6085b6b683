//! Checkpoint directory layout:
//!
//! ```text
//! <dir>/manifest.json   format version, kind, model config, tensor table
//! <dir>/payload.bin     little-endian f64 values in manifest order
//! ```
//!
//! Parameters come first, then (if saved) the optimizer moments.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::adam::{Adam, AdamConfig};
use crate::autodiff::{ParamStore, Tensor};
use crate::model::{BaseForecaster, ContextFormerModel, Model, ModelConfig, ModelError};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const PAYLOAD: &str = "payload.bin";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("corrupt manifest {path}: {message}")]
    CorruptManifest { path: PathBuf, message: String },
    #[error("corrupt payload {path}: {message}")]
    CorruptPayload { path: PathBuf, message: String },
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("tensor {name}: checkpoint shape {found:?}, model shape {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter names differ: {0}")]
    NameMismatch(String),
    #[error("checkpoint config is incompatible: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerEntry {
    pub step: u64,
    pub config: AdamConfig,
    /// `m/<param>` and `v/<param>` for every optimised parameter.
    pub moments: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// `base` or `context`.
    pub kind: String,
    pub config: ModelConfig,
    pub payload_bytes: u64,
    pub tensors: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

struct PayloadWriter {
    bytes: Vec<u8>,
}

impl PayloadWriter {
    fn push(&mut self, name: String, shape: &[usize], data: &[f64]) -> TensorEntry {
        let offset = self.bytes.len() as u64;
        data.iter()
            .for_each(|v| self.bytes.extend_from_slice(&v.to_le_bytes()));
        TensorEntry {
            name,
            shape: shape.to_vec(),
            offset,
        }
    }
}

/// Writes `model` (and optionally its optimizer) to `dir`, creating it.
/// Output bytes are a pure function of the inputs.
pub fn save_checkpoint(
    model: &Model,
    optimizer: Option<&Adam>,
    dir: &Path,
) -> Result<(), CheckpointError> {
    let store = model.as_forecaster().store();
    let mut w = PayloadWriter { bytes: Vec::new() };
    let tensors = store
        .iter()
        .map(|(_, p)| w.push(p.name().to_string(), p.value().shape(), p.value().data()))
        .collect();
    let optimizer = optimizer.map(|adam| {
        let mut moments = Vec::new();
        for id in adam.param_ids() {
            let p = store.get(id);
            let mom = adam.moments(id).expect("listed id");
            let shape = p.value().shape();
            moments.push(w.push(format!("m/{}", p.name()), shape, &mom.m));
            moments.push(w.push(format!("v/{}", p.name()), shape, &mom.v));
        }
        OptimizerEntry {
            step: adam.step,
            config: adam.config,
            moments,
        }
    });
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        kind: model.kind().to_string(),
        config: model.as_forecaster().config().clone(),
        payload_bytes: w.bytes.len() as u64,
        tensors,
        optimizer,
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises") + "\n";
    let manifest_path = dir.join(MANIFEST);
    fs::write(&manifest_path, json).map_err(io_err(&manifest_path))?;
    let payload_path = dir.join(PAYLOAD);
    fs::write(&payload_path, &w.bytes).map_err(io_err(&payload_path))?;
    Ok(())
}

/// Reads only the manifest, validating its version.
pub fn read_checkpoint_manifest(dir: &Path) -> Result<CheckpointManifest, CheckpointError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CheckpointError::CorruptManifest {
            path: path.clone(),
            message: e.to_string(),
        })?;
    // Check the version before the schema so old files report the real cause.
    if let Some(found) = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
    {
        if found != u64::from(CHECKPOINT_FORMAT_VERSION) {
            return Err(CheckpointError::VersionMismatch {
                found: found as u32,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
    }
    serde_json::from_value(value).map_err(|e| CheckpointError::CorruptManifest {
        path,
        message: e.to_string(),
    })
}

struct PayloadReader<'a> {
    path: &'a Path,
    bytes: Vec<u8>,
}

impl PayloadReader<'_> {
    fn read(&self, entry: &TensorEntry) -> Result<Vec<f64>, CheckpointError> {
        let n: usize = entry.shape.iter().product();
        let start = usize::try_from(entry.offset).unwrap_or(usize::MAX);
        let end = start.checked_add(n * 8).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::CorruptPayload {
            path: self.path.to_path_buf(),
            message: format!(
                "tensor {} needs bytes {start}..{} but the payload has {}",
                entry.name,
                start.saturating_add(n * 8),
                self.bytes.len()
            ),
        })?;
        Ok(self.bytes[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn check_shape(entry: &TensorEntry, expected: &[usize]) -> Result<(), CheckpointError> {
    if entry.shape != expected {
        return Err(CheckpointError::ShapeMismatch {
            name: entry.name.clone(),
            expected: expected.to_vec(),
            found: entry.shape.clone(),
        });
    }
    Ok(())
}

fn fill_store(
    store: &mut ParamStore,
    entries: &[TensorEntry],
    payload: &PayloadReader,
) -> Result<(), CheckpointError> {
    let names: Vec<&str> = store.iter().map(|(_, p)| p.name()).collect();
    let found: Vec<&str> = entries.iter().map(|e| e.name.as_str()).collect();
    if names != found {
        let first = names
            .iter()
            .zip(&found)
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("model has {a}, checkpoint has {b}"))
            .unwrap_or_else(|| {
                format!(
                    "model has {} tensors, checkpoint has {}",
                    names.len(),
                    found.len()
                )
            });
        return Err(CheckpointError::NameMismatch(first));
    }
    for (id, entry) in store.ids().collect::<Vec<_>>().into_iter().zip(entries) {
        check_shape(entry, store.value(id).shape())?;
        let data = payload.read(entry)?;
        store.set_value(
            id,
            Tensor::new(entry.shape.clone(), data).expect("checked shape"),
        );
    }
    Ok(())
}

/// Restores a model (and its optimizer, if one was saved) bit-exactly.
pub fn load_checkpoint(dir: &Path) -> Result<(Model, Option<Adam>), CheckpointError> {
    let manifest = read_checkpoint_manifest(dir)?;
    let manifest_path = dir.join(MANIFEST);
    let mut model = match manifest.kind.as_str() {
        "base" => Model::Base(BaseForecaster::new(manifest.config.clone(), 0)?),
        "context" => Model::Context(ContextFormerModel::new(&manifest.config, 0)?),
        other => {
            return Err(CheckpointError::CorruptManifest {
                path: manifest_path,
                message: format!("unknown model kind {other:?}"),
            })
        }
    };
    let payload_path = dir.join(PAYLOAD);
    let bytes = fs::read(&payload_path).map_err(io_err(&payload_path))?;
    if bytes.len() as u64 != manifest.payload_bytes {
        return Err(CheckpointError::CorruptPayload {
            path: payload_path,
            message: format!(
                "{} bytes, manifest declares {}",
                bytes.len(),
                manifest.payload_bytes
            ),
        });
    }
    let payload = PayloadReader {
        path: &payload_path,
        bytes,
    };
    let store = model.as_forecaster_mut().store_mut();
    fill_store(store, &manifest.tensors, &payload)?;
    let optimizer = match &manifest.optimizer {
        None => None,
        Some(entry) => {
            let mut adam = Adam::new(store, entry.config);
            adam.step = entry.step;
            let ids: Vec<_> = adam.param_ids().collect();
            if entry.moments.len() != 2 * ids.len() {
                return Err(CheckpointError::NameMismatch(format!(
                    "optimizer covers {} tensors, model has {} trainable",
                    entry.moments.len() / 2,
                    ids.len()
                )));
            }
            for (id, pair) in ids.into_iter().zip(entry.moments.chunks_exact(2)) {
                let name = store.get(id).name();
                if pair[0].name != format!("m/{name}") || pair[1].name != format!("v/{name}") {
                    return Err(CheckpointError::NameMismatch(format!(
                        "optimizer entry {} for parameter {name}",
                        pair[0].name
                    )));
                }
                let shape = store.value(id).shape().to_vec();
                check_shape(&pair[0], &shape)?;
                check_shape(&pair[1], &shape)?;
                let (m, v) = (payload.read(&pair[0])?, payload.read(&pair[1])?);
                let mom = adam.moments_mut(id).expect("listed id");
                mom.m = m;
                mom.v = v;
            }
            Some(adam)
        }
    };
    Ok((model, optimizer))
}
