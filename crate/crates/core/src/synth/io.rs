//! On-disk dataset format.
//!
//! ```text
//! <dir>/{train,val,test}/data.csv       seq_id,t[,timestamp],ch0..ch{F-1},meta0..meta{K-1}
//! <dir>/{train,val,test}/manifest.json
//! ```
//!
//! Metadata columns hold the `K_ct` categorical codes followed by the `K_cn`
//! continuous values. Floats are written with 17 significant digits so a
//! read-back is exact. Values are stored unnormalised; every manifest carries
//! the training-split statistics.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dataset::{DatasetInfo, MetadataSchema, NormStats, Sequence, SequenceSplit};
use super::SynthError;
use crate::autodiff::Tensor;

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub format_version: u32,
    pub split: String,
    pub n_sequences: usize,
    pub length: usize,
    #[serde(rename = "F")]
    pub n_channels: usize,
    #[serde(rename = "K_ct")]
    pub n_categorical: usize,
    #[serde(rename = "K_cn")]
    pub n_continuous: usize,
    #[serde(rename = "L")]
    pub lookback: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub stride: usize,
    pub categorical_cardinalities: Vec<usize>,
    pub has_timestamps: bool,
    pub normalization: NormStats,
    pub seed: u64,
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> SynthError {
    SynthError::Format {
        path: path.to_path_buf(),
        message: msg.into(),
    }
}

/// Writes all three splits. Output is a pure function of `data`.
pub fn write_dataset(dir: &Path, data: &SequenceSplit) -> Result<(), SynthError> {
    let stats = NormStats::fit(&data.windowed()?.train, &data.info.schema)?;
    let has_timestamps = data
        .train
        .iter()
        .chain(&data.val)
        .chain(&data.test)
        .any(|s| s.timestamps.is_some());
    for (name, seqs) in SPLITS.iter().zip([&data.train, &data.val, &data.test]) {
        let split_dir = dir.join(name);
        fs::create_dir_all(&split_dir).map_err(io_err(&split_dir))?;
        let manifest = SplitManifest {
            format_version: DATASET_FORMAT_VERSION,
            split: name.to_string(),
            n_sequences: seqs.len(),
            length: data.info.length,
            n_channels: data.info.n_channels,
            n_categorical: data.info.schema.n_categorical(),
            n_continuous: data.info.schema.n_continuous,
            lookback: data.info.lookback,
            horizon: data.info.horizon,
            stride: data.info.stride,
            categorical_cardinalities: data.info.schema.categorical_cardinalities.clone(),
            has_timestamps,
            normalization: stats.clone(),
            seed: data.info.seed,
        };
        let manifest_path = split_dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        fs::write(&manifest_path, json + "\n").map_err(io_err(&manifest_path))?;
        write_csv(
            &split_dir.join("data.csv"),
            &data.info,
            seqs,
            has_timestamps,
        )?;
    }
    Ok(())
}

fn header(info: &DatasetInfo, has_timestamps: bool) -> Vec<String> {
    let mut h = vec!["seq_id".to_string(), "t".to_string()];
    if has_timestamps {
        h.push("timestamp".into());
    }
    h.extend((0..info.n_channels).map(|c| format!("ch{c}")));
    let k = info.schema.n_categorical() + info.schema.n_continuous;
    h.extend((0..k).map(|m| format!("meta{m}")));
    h
}

fn write_csv(
    path: &Path,
    info: &DatasetInfo,
    seqs: &[Sequence],
    has_timestamps: bool,
) -> Result<(), SynthError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| format_err(path, e.to_string()))?;
    let csv_err = |e: csv::Error| format_err(path, e.to_string());
    w.write_record(header(info, has_timestamps))
        .map_err(csv_err)?;
    let mut record: Vec<String> = Vec::new();
    for (id, seq) in seqs.iter().enumerate() {
        if has_timestamps && seq.timestamps.is_none() {
            return Err(format_err(path, format!("sequence {id} lacks timestamps")));
        }
        for t in 0..seq.len() {
            record.clear();
            record.push(id.to_string());
            record.push(t.to_string());
            if let Some(ts) = &seq.timestamps {
                record.push(ts[t].to_string());
            }
            record.extend(seq.values.row(t).iter().map(|&v| fmt_f64(v)));
            if let Some(meta) = &seq.metadata {
                let (codes, cont) = info.schema.decode_row(meta.row(t))?;
                record.extend(codes.iter().map(usize::to_string));
                record.extend(cont.iter().map(|&v| fmt_f64(v)));
            }
            w.write_record(&record).map_err(csv_err)?;
        }
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_manifest(split_dir: &Path) -> Result<SplitManifest, SynthError> {
    let path = split_dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let m: SplitManifest =
        serde_json::from_str(&text).map_err(|e| format_err(&path, e.to_string()))?;
    if m.format_version != DATASET_FORMAT_VERSION {
        return Err(format_err(
            &path,
            format!(
                "format version {} (expected {DATASET_FORMAT_VERSION})",
                m.format_version
            ),
        ));
    }
    if m.categorical_cardinalities.len() != m.n_categorical {
        return Err(format_err(
            &path,
            "K_ct disagrees with categorical_cardinalities",
        ));
    }
    Ok(m)
}

/// Reads a dataset directory written by [`write_dataset`] (or by hand in the
/// same format). Returns raw sequences and the stored training statistics.
pub fn read_dataset(dir: &Path) -> Result<(SequenceSplit, NormStats), SynthError> {
    let mut parts: Vec<Vec<Sequence>> = Vec::new();
    let mut first: Option<SplitManifest> = None;
    for name in SPLITS {
        let split_dir = dir.join(name);
        let m = read_manifest(&split_dir)?;
        if let Some(f) = &first {
            let same = f.n_channels == m.n_channels
                && f.categorical_cardinalities == m.categorical_cardinalities
                && f.n_continuous == m.n_continuous
                && f.lookback == m.lookback
                && f.horizon == m.horizon
                && f.has_timestamps == m.has_timestamps;
            if !same {
                return Err(format_err(
                    &split_dir,
                    "manifest disagrees with train manifest",
                ));
            }
        }
        parts.push(read_csv(&split_dir.join("data.csv"), &m)?);
        first.get_or_insert(m);
    }
    let m = first.expect("three splits read");
    let info = DatasetInfo {
        n_channels: m.n_channels,
        lookback: m.lookback,
        horizon: m.horizon,
        stride: m.stride,
        length: m.length,
        schema: MetadataSchema {
            categorical_cardinalities: m.categorical_cardinalities,
            n_continuous: m.n_continuous,
        },
        seed: m.seed,
    };
    let test = parts.pop().expect("test");
    let val = parts.pop().expect("val");
    let train = parts.pop().expect("train");
    Ok((
        SequenceSplit {
            info,
            train,
            val,
            test,
        },
        m.normalization,
    ))
}

fn read_csv(path: &Path, m: &SplitManifest) -> Result<Vec<Sequence>, SynthError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format_err(path, e.to_string()))?;
    let schema = MetadataSchema {
        categorical_cardinalities: m.categorical_cardinalities.clone(),
        n_continuous: m.n_continuous,
    };
    let info = DatasetInfo {
        n_channels: m.n_channels,
        lookback: m.lookback,
        horizon: m.horizon,
        stride: m.stride,
        length: m.length,
        schema: schema.clone(),
        seed: m.seed,
    };
    let expected = header(&info, m.has_timestamps);
    let found: Vec<String> = r
        .headers()
        .map_err(|e| format_err(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if found != expected {
        return Err(format_err(
            path,
            format!("header {found:?}, expected {expected:?}"),
        ));
    }
    let mut builder = SeqBuilder::default();
    let mut seqs = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| format_err(path, e.to_string()))?;
        let bad = |what: &str| format_err(path, format!("row {}: bad {what}", line + 2));
        let mut fields = rec.iter();
        let mut next = || fields.next().ok_or_else(|| bad("column count"));
        let id: usize = next()?.parse().map_err(|_| bad("seq_id"))?;
        let t: usize = next()?.parse().map_err(|_| bad("t"))?;
        let ts: Option<i64> = if m.has_timestamps {
            Some(next()?.parse().map_err(|_| bad("timestamp"))?)
        } else {
            None
        };
        let mut values = Vec::with_capacity(m.n_channels);
        for _ in 0..m.n_channels {
            values.push(next()?.parse::<f64>().map_err(|_| bad("channel value"))?);
        }
        let mut codes = Vec::with_capacity(m.n_categorical);
        for _ in 0..m.n_categorical {
            codes.push(
                next()?
                    .parse::<usize>()
                    .map_err(|_| bad("categorical code"))?,
            );
        }
        let mut cont = Vec::with_capacity(m.n_continuous);
        for _ in 0..m.n_continuous {
            cont.push(
                next()?
                    .parse::<f64>()
                    .map_err(|_| bad("continuous value"))?,
            );
        }
        if id != builder.id || builder.values.is_empty() {
            if !builder.values.is_empty() {
                seqs.push(builder.finish(&info)?);
            }
            if id != seqs.len() {
                return Err(bad("seq_id ordering"));
            }
            builder = SeqBuilder {
                id,
                ..Default::default()
            };
        }
        if t != builder.rows {
            return Err(bad("t ordering"));
        }
        builder.rows += 1;
        builder.values.extend(values);
        if !schema.is_empty() {
            builder.meta.extend(schema.encode_row(&codes, &cont)?);
        }
        if let Some(ts) = ts {
            builder.timestamps.push(ts);
        }
    }
    if !builder.values.is_empty() {
        seqs.push(builder.finish(&info)?);
    }
    if seqs.len() != m.n_sequences {
        return Err(format_err(
            path,
            format!("{} sequences, manifest says {}", seqs.len(), m.n_sequences),
        ));
    }
    Ok(seqs)
}

#[derive(Default)]
struct SeqBuilder {
    id: usize,
    rows: usize,
    values: Vec<f64>,
    meta: Vec<f64>,
    timestamps: Vec<i64>,
}

impl SeqBuilder {
    fn finish(self, info: &DatasetInfo) -> Result<Sequence, SynthError> {
        let values = Tensor::matrix(self.rows, info.n_channels, self.values)?;
        let metadata = if info.schema.is_empty() {
            None
        } else {
            Some(Tensor::matrix(self.rows, info.schema.width(), self.meta)?)
        };
        let timestamps = (!self.timestamps.is_empty()).then_some(self.timestamps);
        Ok(Sequence {
            values,
            metadata,
            timestamps,
        })
    }
}

/// Paths of the per-split files, for callers that hash or copy datasets.
pub fn dataset_files(dir: &Path) -> Vec<PathBuf> {
    SPLITS
        .iter()
        .flat_map(|s| {
            [
                dir.join(s).join("manifest.json"),
                dir.join(s).join("data.csv"),
            ]
        })
        .collect()
}
