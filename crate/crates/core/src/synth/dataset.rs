//! Sequences, forecasting windows, splits and normalisation.

use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::autodiff::Tensor;

/// Floor applied to standard deviations so constant channels normalise to 0.
pub const STD_FLOOR: f64 = 1e-8;

/// Shape of the exogenous features paired with each timestep: categorical
/// fields (one-hot expanded in memory) followed by continuous ones.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataSchema {
    pub categorical_cardinalities: Vec<usize>,
    pub n_continuous: usize,
}

impl MetadataSchema {
    pub fn continuous(n: usize) -> Self {
        Self {
            categorical_cardinalities: Vec::new(),
            n_continuous: n,
        }
    }

    pub fn n_categorical(&self) -> usize {
        self.categorical_cardinalities.len()
    }

    pub fn one_hot_width(&self) -> usize {
        self.categorical_cardinalities.iter().sum()
    }

    /// Width of an encoded metadata row.
    pub fn width(&self) -> usize {
        self.one_hot_width() + self.n_continuous
    }

    pub fn is_empty(&self) -> bool {
        self.width() == 0
    }

    /// One-hot expands categorical codes and appends continuous values.
    pub fn encode_row(&self, codes: &[usize], continuous: &[f64]) -> Result<Vec<f64>, SynthError> {
        if codes.len() != self.n_categorical() || continuous.len() != self.n_continuous {
            return Err(SynthError::Metadata(format!(
                "expected {} categorical and {} continuous values, got {} and {}",
                self.n_categorical(),
                self.n_continuous,
                codes.len(),
                continuous.len()
            )));
        }
        let mut row = Vec::with_capacity(self.width());
        for (&code, &card) in codes.iter().zip(&self.categorical_cardinalities) {
            if code >= card {
                return Err(SynthError::Metadata(format!(
                    "category {code} out of range for cardinality {card}"
                )));
            }
            row.extend((0..card).map(|c| if c == code { 1.0 } else { 0.0 }));
        }
        row.extend_from_slice(continuous);
        Ok(row)
    }

    /// Inverse of [`MetadataSchema::encode_row`].
    pub fn decode_row(&self, row: &[f64]) -> Result<(Vec<usize>, Vec<f64>), SynthError> {
        if row.len() != self.width() {
            return Err(SynthError::Metadata(format!(
                "row width {} does not match schema width {}",
                row.len(),
                self.width()
            )));
        }
        let mut codes = Vec::with_capacity(self.n_categorical());
        let mut offset = 0;
        for &card in &self.categorical_cardinalities {
            let block = &row[offset..offset + card];
            let hot: Vec<usize> = (0..card).filter(|&c| block[c] == 1.0).collect();
            let valid = hot.len() == 1 && block.iter().all(|&v| v == 0.0 || v == 1.0);
            if !valid {
                return Err(SynthError::Metadata(format!(
                    "invalid one-hot block {block:?}"
                )));
            }
            codes.push(hot[0]);
            offset += card;
        }
        Ok((codes, row[offset..].to_vec()))
    }
}

/// One raw multivariate series with aligned metadata rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    /// `len × F` values.
    pub values: Tensor,
    /// `len × K` encoded metadata, absent when the schema is empty.
    pub metadata: Option<Tensor>,
    /// Unix seconds per timestep.
    pub timestamps: Option<Vec<i64>>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A forecasting example `(X_hist, C_hist, X_future)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedSample {
    /// `L × F`.
    pub x_hist: Tensor,
    /// `L × K`; row `t` belongs to `x_hist` row `t`.
    pub c_hist: Option<Tensor>,
    /// `T × F`.
    pub x_future: Tensor,
    /// Unix seconds for the `L` history steps.
    pub timestamps: Option<Vec<i64>>,
}

/// Geometry shared by every split of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub n_channels: usize,
    pub lookback: usize,
    pub horizon: usize,
    /// Sliding-window stride used to cut sequences into samples.
    pub stride: usize,
    /// Timesteps per stored sequence.
    pub length: usize,
    pub schema: MetadataSchema,
    pub seed: u64,
}

impl DatasetInfo {
    pub fn window_len(&self) -> usize {
        self.lookback + self.horizon
    }
}

/// Cuts a series into `(len − window)/stride + 1` overlapping samples.
pub fn sliding_windows(
    series: &Tensor,
    metadata: Option<&Tensor>,
    timestamps: Option<&[i64]>,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<WindowedSample>, SynthError> {
    let len = series.rows();
    let window = lookback + horizon;
    if lookback == 0 || horizon == 0 || stride == 0 {
        return Err(SynthError::InvalidConfig(
            "lookback, horizon and stride must be positive".into(),
        ));
    }
    if window > len {
        return Err(SynthError::WindowTooLong { window, len });
    }
    if metadata.is_some_and(|m| m.rows() != len) || timestamps.is_some_and(|t| t.len() != len) {
        return Err(SynthError::Metadata(
            "metadata and timestamps must have one row per timestep".into(),
        ));
    }
    let rows = |t: &Tensor, start: usize, n: usize| {
        let c = t.cols();
        Tensor::matrix(n, c, t.data()[start * c..(start + n) * c].to_vec()).expect("in bounds")
    };
    let count = (len - window) / stride + 1;
    Ok((0..count)
        .map(|w| {
            let s = w * stride;
            WindowedSample {
                x_hist: rows(series, s, lookback),
                c_hist: metadata.map(|m| rows(m, s, lookback)),
                x_future: rows(series, s + lookback, horizon),
                timestamps: timestamps.map(|t| t[s..s + lookback].to_vec()),
            }
        })
        .collect())
}

/// Raw sequences grouped by split; the storage-level view of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSplit {
    pub info: DatasetInfo,
    pub train: Vec<Sequence>,
    pub val: Vec<Sequence>,
    pub test: Vec<Sequence>,
}

impl SequenceSplit {
    pub fn windowed(&self) -> Result<DatasetSplit, SynthError> {
        let cut = |seqs: &[Sequence]| -> Result<Vec<WindowedSample>, SynthError> {
            let mut out = Vec::new();
            for s in seqs {
                out.extend(sliding_windows(
                    &s.values,
                    s.metadata.as_ref(),
                    s.timestamps.as_deref(),
                    self.info.lookback,
                    self.info.horizon,
                    self.info.stride,
                )?);
            }
            Ok(out)
        };
        Ok(DatasetSplit {
            info: self.info.clone(),
            train: cut(&self.train)?,
            val: cut(&self.val)?,
            test: cut(&self.test)?,
            stats: None,
        })
    }
}

/// Sizes of a 7:1:2 train/val/test partition of `n` items.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 7 / 10;
    let val = n / 10;
    (train, val, n - train - val)
}

/// Per-channel z-score parameters, estimated on the training split only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
    /// Statistics of the continuous metadata columns.
    pub meta_mean: Vec<f64>,
    pub meta_std: Vec<f64>,
}

impl NormStats {
    /// Estimates statistics from samples. Population standard deviation with a
    /// floor of [`STD_FLOOR`].
    pub fn fit(samples: &[WindowedSample], schema: &MetadataSchema) -> Result<Self, SynthError> {
        let first = samples.first().ok_or(SynthError::EmptySplit("train"))?;
        let f = first.x_hist.cols();
        let mut channels = vec![Welford::default(); f];
        let mut meta = vec![Welford::default(); schema.n_continuous];
        let offset = schema.one_hot_width();
        for s in samples {
            for block in [&s.x_hist, &s.x_future] {
                for row in block.data().chunks(f) {
                    channels.iter_mut().zip(row).for_each(|(w, &v)| w.push(v));
                }
            }
            if let Some(c) = &s.c_hist {
                for row in c.data().chunks(c.cols()) {
                    meta.iter_mut()
                        .zip(&row[offset..])
                        .for_each(|(w, &v)| w.push(v));
                }
            }
        }
        let split = |ws: &[Welford]| -> (Vec<f64>, Vec<f64>) {
            ws.iter().map(|w| (w.mean, w.std().max(STD_FLOOR))).unzip()
        };
        let (channel_mean, channel_std) = split(&channels);
        let (meta_mean, meta_std) = split(&meta);
        Ok(Self {
            channel_mean,
            channel_std,
            meta_mean,
            meta_std,
        })
    }

    fn apply_channels(&self, t: &Tensor, forward: bool) -> Tensor {
        let f = t.cols();
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(f) {
            for (j, v) in row.iter_mut().enumerate() {
                let (m, s) = (self.channel_mean[j], self.channel_std[j]);
                *v = if forward { (*v - m) / s } else { *v * s + m };
            }
        }
        out
    }

    fn apply_meta(&self, c: &Tensor, offset: usize, forward: bool) -> Tensor {
        let k = c.cols();
        let mut out = c.clone();
        for row in out.data_mut().chunks_mut(k) {
            for (j, v) in row[offset..].iter_mut().enumerate() {
                let (m, s) = (self.meta_mean[j], self.meta_std[j]);
                *v = if forward { (*v - m) / s } else { *v * s + m };
            }
        }
        out
    }

    fn transform(
        &self,
        s: &WindowedSample,
        schema: &MetadataSchema,
        forward: bool,
    ) -> WindowedSample {
        WindowedSample {
            x_hist: self.apply_channels(&s.x_hist, forward),
            c_hist: s
                .c_hist
                .as_ref()
                .map(|c| self.apply_meta(c, schema.one_hot_width(), forward)),
            x_future: self.apply_channels(&s.x_future, forward),
            timestamps: s.timestamps.clone(),
        }
    }

    /// Maps a forecast (`T × F`) back to the original scale.
    pub fn denormalize_values(&self, t: &Tensor) -> Tensor {
        self.apply_channels(t, false)
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Welford {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, v: f64) {
        self.n += 1.0;
        let d = v - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (v - self.mean);
    }

    fn std(&self) -> f64 {
        if self.n > 0.0 {
            (self.m2 / self.n).sqrt()
        } else {
            0.0
        }
    }
}

type SamplesByPart = (
    Vec<WindowedSample>,
    Vec<WindowedSample>,
    Vec<WindowedSample>,
);

/// Forecasting samples grouped by split.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub info: DatasetInfo,
    pub train: Vec<WindowedSample>,
    pub val: Vec<WindowedSample>,
    pub test: Vec<WindowedSample>,
    /// Present once the split has been normalised.
    pub stats: Option<NormStats>,
}

impl DatasetSplit {
    pub fn part(&self, name: &str) -> Option<&[WindowedSample]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    fn map_samples(&self, f: impl Fn(&WindowedSample) -> WindowedSample) -> SamplesByPart {
        (
            self.train.iter().map(&f).collect(),
            self.val.iter().map(&f).collect(),
            self.test.iter().map(&f).collect(),
        )
    }
}

/// Z-scores series channels and continuous metadata with train-split
/// statistics. Categorical one-hot columns are left untouched.
pub fn normalize(split: &DatasetSplit) -> Result<DatasetSplit, SynthError> {
    if split.stats.is_some() {
        return Err(SynthError::AlreadyNormalized);
    }
    let stats = NormStats::fit(&split.train, &split.info.schema)?;
    let schema = &split.info.schema;
    let (train, val, test) = split.map_samples(|s| stats.transform(s, schema, true));
    Ok(DatasetSplit {
        info: split.info.clone(),
        train,
        val,
        test,
        stats: Some(stats),
    })
}

/// Inverse of [`normalize`].
pub fn denormalize(split: &DatasetSplit) -> Result<DatasetSplit, SynthError> {
    let stats = split.stats.as_ref().ok_or(SynthError::NotNormalized)?;
    let schema = &split.info.schema;
    let (train, val, test) = split.map_samples(|s| stats.transform(s, schema, false));
    Ok(DatasetSplit {
        info: split.info.clone(),
        train,
        val,
        test,
        stats: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(len: usize) -> Tensor {
        Tensor::matrix(len, 1, (0..len).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn window_counts() {
        let count = |len, lookback, horizon| {
            sliding_windows(&series(len), None, None, lookback, horizon, 24)
                .unwrap()
                .len()
        };
        assert_eq!(count(192, 96, 96), 1);
        assert_eq!(count(240, 96, 96), 3);
        assert_eq!(count(500, 96, 48), 15);
    }

    #[test]
    fn window_longer_than_series_is_rejected() {
        let err = sliding_windows(&series(100), None, None, 96, 48, 24).unwrap_err();
        assert!(matches!(
            err,
            SynthError::WindowTooLong {
                window: 144,
                len: 100
            }
        ));
    }

    #[test]
    fn windows_keep_metadata_aligned() {
        let len = 60;
        let meta = Tensor::matrix(len, 2, (0..2 * len).map(|v| v as f64).collect()).unwrap();
        let ts: Vec<i64> = (0..len as i64).map(|t| 1000 + t).collect();
        let w = sliding_windows(&series(len), Some(&meta), Some(&ts), 20, 10, 7).unwrap();
        for (i, s) in w.iter().enumerate() {
            let c = s.c_hist.as_ref().unwrap();
            for t in 0..20 {
                let step = s.x_hist.get(t, 0) as usize;
                assert_eq!(step, i * 7 + t);
                assert_eq!(c.row(t), meta.row(step));
                assert_eq!(s.timestamps.as_ref().unwrap()[t], 1000 + step as i64);
            }
            assert_eq!(s.x_future.get(0, 0) as usize, i * 7 + 20);
        }
    }

    #[test]
    fn split_ratio() {
        assert_eq!(split_sizes(10), (7, 1, 2));
        assert_eq!(split_sizes(10_000), (7000, 1000, 2000));
        assert_eq!(split_sizes(2000), (1400, 200, 400));
    }

    #[test]
    fn one_hot_round_trip_and_validation() {
        let schema = MetadataSchema {
            categorical_cardinalities: vec![3, 2],
            n_continuous: 1,
        };
        let row = schema.encode_row(&[2, 0], &[0.5]).unwrap();
        assert_eq!(row, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.5]);
        assert_eq!(schema.decode_row(&row).unwrap(), (vec![2, 0], vec![0.5]));
        assert!(schema.encode_row(&[3, 0], &[0.5]).is_err());
        assert!(schema.decode_row(&[1.0, 1.0, 0.0, 1.0, 0.0, 0.5]).is_err());
    }

    fn sample(x: f64, meta: f64) -> WindowedSample {
        WindowedSample {
            x_hist: Tensor::matrix(2, 1, vec![x, x]).unwrap(),
            c_hist: Some(Tensor::matrix(2, 3, vec![1.0, 0.0, meta, 1.0, 0.0, meta]).unwrap()),
            x_future: Tensor::matrix(1, 1, vec![x]).unwrap(),
            timestamps: None,
        }
    }

    fn split_of(train: Vec<WindowedSample>, test: Vec<WindowedSample>) -> DatasetSplit {
        DatasetSplit {
            info: DatasetInfo {
                n_channels: 1,
                lookback: 2,
                horizon: 1,
                stride: 3,
                length: 3,
                schema: MetadataSchema {
                    categorical_cardinalities: vec![2],
                    n_continuous: 1,
                },
                seed: 0,
            },
            train,
            val: Vec::new(),
            test,
            stats: None,
        }
    }

    #[test]
    fn normalize_uses_train_statistics() {
        // Train values 8 and 12: mean 10, population std 2.
        let split = split_of(
            vec![sample(8.0, 1.0), sample(12.0, 3.0)],
            vec![sample(12.0, 5.0)],
        );
        let norm = normalize(&split).unwrap();
        let stats = norm.stats.as_ref().unwrap();
        assert_eq!(stats.channel_mean, vec![10.0]);
        assert_eq!(stats.channel_std, vec![2.0]);
        assert_eq!(norm.test[0].x_hist.get(0, 0), 1.0);
        let c = norm.test[0].c_hist.as_ref().unwrap();
        // One-hot columns untouched, continuous column (5 − 2) / 1.
        assert_eq!(c.row(0), &[1.0, 0.0, 3.0]);
        assert!(matches!(
            normalize(&norm),
            Err(SynthError::AlreadyNormalized)
        ));
    }

    #[test]
    fn constant_channel_normalises_to_zero() {
        let split = split_of(
            vec![sample(4.0, 1.0), sample(4.0, 1.0)],
            vec![sample(4.0, 1.0)],
        );
        let norm = normalize(&split).unwrap();
        assert_eq!(norm.stats.as_ref().unwrap().channel_std, vec![STD_FLOOR]);
        assert!(norm.test[0].x_hist.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_requires_training_data() {
        let split = split_of(Vec::new(), vec![sample(1.0, 1.0)]);
        assert!(matches!(
            normalize(&split),
            Err(SynthError::EmptySplit("train"))
        ));
    }

    #[test]
    fn denormalize_inverts_normalize() {
        let split = split_of(
            vec![sample(0.3, -1.7), sample(2.9, 0.25), sample(-4.1, 8.0)],
            vec![sample(7.7, 3.3)],
        );
        let back = denormalize(&normalize(&split).unwrap()).unwrap();
        for (a, b) in back
            .train
            .iter()
            .chain(&back.test)
            .zip(split.train.iter().chain(&split.test))
        {
            assert!(a.x_hist.max_abs_diff(&b.x_hist) <= 1e-12);
            assert!(a.x_future.max_abs_diff(&b.x_future) <= 1e-12);
            let (ca, cb) = (a.c_hist.as_ref().unwrap(), b.c_hist.as_ref().unwrap());
            assert!(ca.max_abs_diff(cb) <= 1e-12);
        }
    }
}
