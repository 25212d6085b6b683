//! Closed-form autoregression with exogenous residual regression.
//!
//! An AR(p) model is fitted by least squares on a lagged design matrix. Context
//! enters only through a second least-squares fit of the AR residuals on the
//! context matrix, so the AR coefficients are untouched and the residual error
//! can never increase: `γ = 0` is always a feasible fit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tensor, TensorError};
use crate::rng::{mix_seed, stream_rng};
use crate::synth::{gen_latent_ar_dataset, LatentArConfig, LatentArSequence, SynthError};

/// Ridge added when the design matrix is numerically rank deficient.
pub const RIDGE_LAMBDA: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum LinearError {
    #[error("series of length {len} is too short for lag order {p}")]
    SeriesTooShort { len: usize, p: usize },
    #[error("underdetermined system: {rows} rows for {cols} unknowns")]
    Underdetermined { rows: usize, cols: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid sweep configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Lagged regression problem: row `i` of `x` is `[y_{t−1}, …, y_{t−p}]` for
/// target `y[i] = y_t`, with `t = p + i`.
#[derive(Clone, Debug, PartialEq)]
pub struct LaggedDesign {
    pub x: Tensor,
    pub y: Vec<f64>,
}

impl LaggedDesign {
    pub fn rows(&self) -> usize {
        self.y.len()
    }
}

pub fn build_lagged(series: &[f64], p: usize) -> Result<LaggedDesign, LinearError> {
    if p == 0 || series.len() <= p {
        return Err(LinearError::SeriesTooShort {
            len: series.len(),
            p,
        });
    }
    let n = series.len() - p;
    let mut data = Vec::with_capacity(n * p);
    for t in p..series.len() {
        data.extend((1..=p).map(|lag| series[t - lag]));
    }
    Ok(LaggedDesign {
        x: Tensor::matrix(n, p, data)?,
        y: series[p..].to_vec(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FitWarning {
    /// The design had numerical rank below its column count; the solution is
    /// the ridge-regularised one.
    RankDeficient { rank: usize, columns: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeastSquares {
    pub coefficients: Vec<f64>,
    pub warning: Option<FitWarning>,
}

/// Minimises `‖y − Xβ‖²` by Householder QR. Rank-deficient designs fall back to
/// the ridge solution with `λ = RIDGE_LAMBDA`, computed by QR of the augmented
/// system `[X; √λ I]`.
pub fn fit_least_squares(x: &Tensor, y: &[f64]) -> Result<LeastSquares, LinearError> {
    if x.rank() != 2 || x.rows() != y.len() {
        return Err(LinearError::Dimension(format!(
            "design {:?} against {} targets",
            x.shape(),
            y.len()
        )));
    }
    let (n, p) = (x.rows(), x.cols());
    if n < p {
        return Err(LinearError::Underdetermined { rows: n, cols: p });
    }
    let qr = HouseholderQr::new(x, y);
    let rank = qr.numerical_rank();
    if rank == p {
        return Ok(LeastSquares {
            coefficients: qr.solve(),
            warning: None,
        });
    }
    log::warn!("rank-deficient design ({rank} of {p} columns); applying ridge {RIDGE_LAMBDA}");
    let mut aug = x.data().to_vec();
    let root = RIDGE_LAMBDA.sqrt();
    for j in 0..p {
        aug.extend((0..p).map(|c| if c == j { root } else { 0.0 }));
    }
    let mut y_aug = y.to_vec();
    y_aug.resize(n + p, 0.0);
    let aug = Tensor::matrix(n + p, p, aug)?;
    Ok(LeastSquares {
        coefficients: HouseholderQr::new(&aug, &y_aug).solve(),
        warning: Some(FitWarning::RankDeficient { rank, columns: p }),
    })
}

/// In-place Householder QR of a column-major copy of `X`, with `Qᵀy` applied
/// alongside.
struct HouseholderQr {
    n: usize,
    p: usize,
    /// Column-major; upper triangle holds `R` after factorisation.
    a: Vec<f64>,
    qty: Vec<f64>,
}

impl HouseholderQr {
    fn new(x: &Tensor, y: &[f64]) -> Self {
        let (n, p) = (x.rows(), x.cols());
        let mut a = vec![0.0; n * p];
        for i in 0..n {
            for j in 0..p {
                a[j * n + i] = x.get(i, j);
            }
        }
        let mut qr = Self {
            n,
            p,
            a,
            qty: y.to_vec(),
        };
        qr.factor();
        qr
    }

    fn factor(&mut self) {
        let n = self.n;
        let mut v = vec![0.0; n];
        for k in 0..self.p {
            let col = &self.a[k * n..(k + 1) * n];
            let norm = col[k..].iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let alpha = if col[k] > 0.0 { -norm } else { norm };
            v[k..].copy_from_slice(&col[k..]);
            v[k] -= alpha;
            let vnorm2: f64 = v[k..].iter().map(|x| x * x).sum();
            if vnorm2 == 0.0 {
                continue;
            }
            let reflect = |target: &mut [f64]| {
                let dot: f64 = v[k..].iter().zip(&target[k..]).map(|(a, b)| a * b).sum();
                let s = 2.0 * dot / vnorm2;
                target[k..]
                    .iter_mut()
                    .zip(&v[k..])
                    .for_each(|(t, vi)| *t -= s * vi);
            };
            for j in k..self.p {
                reflect(&mut self.a[j * n..(j + 1) * n]);
            }
            reflect(&mut self.qty);
        }
    }

    fn r(&self, i: usize, j: usize) -> f64 {
        self.a[j * self.n + i]
    }

    fn numerical_rank(&self) -> usize {
        let diag: Vec<f64> = (0..self.p).map(|k| self.r(k, k).abs()).collect();
        let max = diag.iter().copied().fold(0.0, f64::max);
        let tol = max * self.n.max(self.p) as f64 * f64::EPSILON;
        diag.iter().filter(|&&d| d > tol).count()
    }

    /// Back substitution `Rβ = (Qᵀy)[..p]`.
    fn solve(&self) -> Vec<f64> {
        let mut beta = vec![0.0; self.p];
        for i in (0..self.p).rev() {
            let acc: f64 = (i + 1..self.p).map(|j| self.r(i, j) * beta[j]).sum();
            beta[i] = (self.qty[i] - acc) / self.r(i, i);
        }
        beta
    }
}

fn residuals(x: &Tensor, y: &[f64], coef: &[f64]) -> Vec<f64> {
    y.iter()
        .enumerate()
        .map(|(i, &yi)| yi - x.row(i).iter().zip(coef).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

fn squared_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Least-squares AR(p) fit.
#[derive(Clone, Debug, PartialEq)]
pub struct ArFit {
    pub beta: Vec<f64>,
    /// `Y − Xβ`.
    pub residuals: Vec<f64>,
    /// `‖Y − Xβ‖²`.
    pub e_orig: f64,
    pub warning: Option<FitWarning>,
}

impl ArFit {
    pub fn n(&self) -> usize {
        self.residuals.len()
    }
}

pub fn fit_ar(series: &[f64], p: usize) -> Result<ArFit, LinearError> {
    let design = build_lagged(series, p)?;
    let ls = fit_least_squares(&design.x, &design.y)?;
    let residuals = residuals(&design.x, &design.y, &ls.coefficients);
    Ok(ArFit {
        e_orig: squared_norm(&residuals),
        beta: ls.coefficients,
        residuals,
        warning: ls.warning,
    })
}

/// Exogenous regression of AR residuals on context.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextFit {
    pub gamma: Vec<f64>,
    /// `Y′ − Cγ`.
    pub residuals: Vec<f64>,
    /// `‖Y′ − Cγ‖²`, never above the refined fit's `e_orig`.
    pub e_new: f64,
    pub warning: Option<FitWarning>,
}

/// Fits `Y′ = Cγ + ε′` where `Y′` are the AR residuals and `C` is `n × q`.
pub fn fit_context_residuals(fit: &ArFit, context: &Tensor) -> Result<ContextFit, LinearError> {
    if context.rank() != 2 || context.rows() != fit.n() {
        return Err(LinearError::Dimension(format!(
            "context {:?} has to have {} rows",
            context.shape(),
            fit.n()
        )));
    }
    let ls = fit_least_squares(context, &fit.residuals)?;
    let res = residuals(context, &fit.residuals, &ls.coefficients);
    let e_new = squared_norm(&res);
    if e_new > fit.e_orig {
        // Only reachable through rounding; γ = 0 attains e_orig exactly.
        return Ok(ContextFit {
            gamma: vec![0.0; context.cols()],
            residuals: fit.residuals.clone(),
            e_new: fit.e_orig,
            warning: ls.warning,
        });
    }
    Ok(ContextFit {
        gamma: ls.coefficients,
        residuals: res,
        e_new,
        warning: ls.warning,
    })
}

/// Where the sweep's context columns come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextSource {
    /// The latent signals that generated the series.
    #[default]
    Latent,
    /// I.i.d. standard normal columns unrelated to the series.
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub data: LatentArConfig,
    /// Order of the fitted AR model.
    pub ar_order: usize,
    /// Largest number of context columns `Q`; must not exceed the latents
    /// available when `context` is `latent`.
    pub max_context: usize,
    pub context: ContextSource,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            data: LatentArConfig::default(),
            ar_order: 10,
            max_context: 5,
            context: ContextSource::Latent,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub q: usize,
    pub mean_mse: f64,
    pub std_mse: f64,
    pub n_sequences: usize,
}

/// Mean squared residual error of the context-refined AR model for each
/// number of context columns `q = 0..=Q`; `q = 0` is the plain AR error.
pub fn run_context_sweep(cfg: &SweepConfig) -> Result<Vec<SweepRow>, LinearError> {
    if cfg.context == ContextSource::Latent && cfg.max_context > cfg.data.n_latents {
        return Err(LinearError::InvalidConfig(format!(
            "max_context {} exceeds the {} latent signals",
            cfg.max_context, cfg.data.n_latents
        )));
    }
    if cfg.ar_order == 0 || cfg.data.length <= cfg.ar_order + cfg.max_context {
        return Err(LinearError::InvalidConfig(format!(
            "length {} too short for AR({}) with {} context columns",
            cfg.data.length, cfg.ar_order, cfg.max_context
        )));
    }
    let data = gen_latent_ar_dataset(&cfg.data)?;
    let per_seq: Vec<Vec<f64>> = data
        .par_iter()
        .enumerate()
        .map(|(i, seq)| sweep_sequence(cfg, i, seq))
        .collect::<Result<_, _>>()?;
    let count = per_seq.len();
    Ok((0..=cfg.max_context)
        .map(|q| {
            let vals: Vec<f64> = per_seq.iter().map(|v| v[q]).collect();
            let mean = vals.iter().sum::<f64>() / count as f64;
            let var = if count > 1 {
                vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1) as f64
            } else {
                0.0
            };
            SweepRow {
                q,
                mean_mse: mean,
                std_mse: var.sqrt(),
                n_sequences: count,
            }
        })
        .collect())
}

/// Per-`q` MSE for one sequence. Each larger context set nests the smaller
/// one, so the error is carried forward if a fit is not an improvement.
fn sweep_sequence(
    cfg: &SweepConfig,
    index: usize,
    seq: &LatentArSequence,
) -> Result<Vec<f64>, LinearError> {
    let p = cfg.ar_order;
    let ar = fit_ar(&seq.y, p)?;
    let n = ar.n();
    let mut noise_rng = stream_rng(mix_seed(&[cfg.data.seed, 0x006e_6f69_7365]), index as u64);
    let columns: Vec<Vec<f64>> = (0..cfg.max_context)
        .map(|j| match cfg.context {
            ContextSource::Latent => seq.latents[j][p..].to_vec(),
            ContextSource::Noise => (0..n)
                .map(|_| {
                    rand_distr::Distribution::<f64>::sample(
                        &rand_distr::StandardNormal,
                        &mut noise_rng,
                    )
                })
                .collect(),
        })
        .collect();
    let mut errors = vec![ar.e_orig / n as f64];
    let mut best = ar.e_orig;
    for q in 1..=cfg.max_context {
        let data = (0..n)
            .flat_map(|i| columns[..q].iter().map(move |c| c[i]))
            .collect();
        let c = Tensor::matrix(n, q, data)?;
        let fit = fit_context_residuals(&ar, &c)?;
        best = best.min(fit.e_new);
        errors.push(best / n as f64);
    }
    Ok(errors)
}

/// Sweep table as CSV with header `q,mean_mse,std_mse,n_sequences`.
pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("q,mean_mse,std_mse,n_sequences\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.16e},{:.16e},{}\n",
            r.q, r.mean_mse, r.std_mse, r.n_sequences
        ));
    }
    out
}
