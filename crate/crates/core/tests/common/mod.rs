#![allow(dead_code)]
//! Shared test oracles. Nothing here calls into the code paths under test
//! beyond building forward graphs.

use contextformer::autodiff::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Smallest gradient norm used as a relative-error denominator.
pub const GRAD_SCALE_FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a).max(norm(b));
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Central finite-difference gradient of a scalar function of one flat input.
pub fn numeric_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Compares tape gradients against central differences for every input.
///
/// `build` maps input vars to a scalar loss; it is re-run on a fresh tape for
/// each perturbed evaluation. Returns the worst relative error over inputs.
pub fn gradient_check(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (idx, input) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[idx])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let numeric = numeric_gradient(input.data(), |probe| {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, other)| {
                    if j == idx {
                        t.leaf(
                            Tensor::new(other.shape().to_vec(), probe.to_vec()).unwrap(),
                            true,
                        )
                    } else {
                        t.leaf(other.clone(), true)
                    }
                })
                .collect();
            let l = build(&mut t, &vs);
            t.value(l).data()[0]
        });
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Projects a tensor-valued node to a scalar with fixed pseudo-random weights so
/// that every output element carries a distinct upstream gradient.
pub fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let shape = tape.shape(x).to_vec();
    let mut r = rng(seed ^ 0x5eed);
    let w = uniform_tensor(&mut r, &shape);
    let wv = tape.constant(w);
    let prod = tape.mul(x, wv).unwrap();
    tape.sum(prod)
}

pub const DIFFERENTIABLE_OPS: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "add_bias",
    "transpose",
    "reshape",
    "softmax_rows",
    "softmax_cols",
    "gelu",
    "layer_norm",
    "dropout",
    "concat_rows",
    "concat_cols",
    "slice_cols",
    "sum",
    "mean",
    "mse",
];

/// Worst relative gradient error of one primitive on random inputs in [−1, 1].
pub fn op_gradient_error(op: &str, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut t = |shape: &[usize]| uniform_tensor(&mut r, shape);
    match op {
        "matmul" => gradient_check(&[t(&[3, 4]), t(&[4, 2])], |tp, v| {
            let y = tp.matmul(v[0], v[1]).unwrap();
            weighted_sum(tp, y, seed)
        }),
        "add" | "sub" | "mul" => {
            let inputs = [t(&[3, 5]), t(&[3, 5])];
            gradient_check(&inputs, |tp, v| {
                let y = match op {
                    "add" => tp.add(v[0], v[1]),
                    "sub" => tp.sub(v[0], v[1]),
                    _ => tp.mul(v[0], v[1]),
                }
                .unwrap();
                weighted_sum(tp, y, seed)
            })
        }
        "scale" => gradient_check(&[t(&[4, 3])], |tp, v| {
            let y = tp.scale(v[0], -1.7);
            weighted_sum(tp, y, seed)
        }),
        "add_bias" => gradient_check(&[t(&[4, 3]), t(&[3])], |tp, v| {
            let y = tp.add_bias(v[0], v[1]).unwrap();
            weighted_sum(tp, y, seed)
        }),
        "transpose" => gradient_check(&[t(&[2, 5])], |tp, v| {
            let y = tp.transpose(v[0]).unwrap();
            weighted_sum(tp, y, seed)
        }),
        "reshape" => gradient_check(&[t(&[2, 6])], |tp, v| {
            let y = tp.reshape(v[0], &[3, 4]).unwrap();
            weighted_sum(tp, y, seed)
        }),
        "softmax_rows" | "softmax_cols" => {
            let axis = usize::from(op == "softmax_rows");
            gradient_check(&[t(&[3, 5])], |tp, v| {
                let y = tp.softmax(v[0], axis).unwrap();
                weighted_sum(tp, y, seed)
            })
        }
        "gelu" => gradient_check(&[t(&[4, 4])], |tp, v| {
            let y = tp.gelu(v[0]);
            weighted_sum(tp, y, seed)
        }),
        "layer_norm" => gradient_check(&[t(&[3, 6]), t(&[6]), t(&[6])], |tp, v| {
            let y = tp.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            weighted_sum(tp, y, seed)
        }),
        "dropout" => gradient_check(&[t(&[4, 5])], |tp, v| {
            // Same seed on every evaluation gives the same mask.
            let mut mask_rng = rng(seed.wrapping_add(99));
            let y = tp.dropout(v[0], 0.3, true, &mut mask_rng).unwrap();
            weighted_sum(tp, y, seed)
        }),
        "concat_rows" | "concat_cols" => {
            let (axis, a, b) = if op == "concat_rows" {
                (0, t(&[2, 3]), t(&[4, 3]))
            } else {
                (1, t(&[3, 2]), t(&[3, 4]))
            };
            gradient_check(&[a, b], |tp, v| {
                let y = tp.concat(&[v[0], v[1], v[0]], axis).unwrap();
                weighted_sum(tp, y, seed)
            })
        }
        "slice_cols" => gradient_check(&[t(&[3, 6])], |tp, v| {
            let y = tp.slice_cols(v[0], 2, 3).unwrap();
            weighted_sum(tp, y, seed)
        }),
        "sum" => gradient_check(&[t(&[3, 3])], |tp, v| {
            let sq = tp.mul(v[0], v[0]).unwrap();
            tp.sum(sq)
        }),
        "mean" => gradient_check(&[t(&[3, 3])], |tp, v| {
            let sq = tp.mul(v[0], v[0]).unwrap();
            tp.mean(sq)
        }),
        "mse" => gradient_check(&[t(&[4, 2]), t(&[4, 2])], |tp, v| {
            tp.mse(v[0], v[1]).unwrap()
        }),
        other => panic!("unknown op {other}"),
    }
}

/// Largest eigenvalue modulus of the companion matrix of
/// `y_t = c_1 y_{t−1} + … + c_k y_{t−k}`.
pub fn companion_spectral_radius(coeffs: &[f64]) -> f64 {
    let k = coeffs.len();
    let mut m = nalgebra::DMatrix::<f64>::zeros(k, k);
    for (j, &c) in coeffs.iter().enumerate() {
        m[(0, j)] = c;
    }
    for i in 1..k {
        m[(i, i - 1)] = 1.0;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Solves `XᵀX β = Xᵀy` by Gaussian elimination with partial pivoting.
pub fn normal_equations_solve(x: &Tensor, y: &[f64]) -> Vec<f64> {
    let (n, p) = (x.rows(), x.cols());
    let mut a = vec![vec![0.0; p + 1]; p];
    for i in 0..p {
        for j in 0..p {
            a[i][j] = (0..n).map(|r| x.get(r, i) * x.get(r, j)).sum();
        }
        a[i][p] = (0..n).map(|r| x.get(r, i) * y[r]).sum();
    }
    for col in 0..p {
        let pivot = (col..p)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        for row in col + 1..p {
            let f = a[row][col] / a[col][col];
            for k in col..=p {
                a[row][k] -= f * a[col][k];
            }
        }
    }
    let mut beta = vec![0.0; p];
    for i in (0..p).rev() {
        let acc: f64 = (i + 1..p).map(|j| a[i][j] * beta[j]).sum();
        beta[i] = (a[i][p] - acc) / a[i][i];
    }
    beta
}

pub fn sha256_file(path: &std::path::Path) -> Vec<u8> {
    use sha2::Digest;
    sha2::Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

/// Adds `U(−scale, scale)` noise to every trainable parameter so that no
/// gradient path is exactly zero.
pub fn perturb_trainable(store: &mut contextformer::autodiff::ParamStore, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for id in store.trainable_ids() {
        for v in store.value_mut(id).data_mut() {
            *v += r.random_range(-scale..scale);
        }
    }
}

/// Worst per-tensor relative error between tape gradients of the eval-mode
/// MSE loss and central differences, over all trainable parameters.
pub fn model_gradient_error(
    model: &mut dyn contextformer::model::Forecaster,
    sample: &contextformer::synth::WindowedSample,
) -> f64 {
    use contextformer::model::Mode;
    let loss_of = |m: &dyn contextformer::model::Forecaster| {
        let mut tape = Tape::new();
        let pred = m.forward(&mut tape, sample, &mut Mode::eval()).unwrap();
        let target = tape.constant(sample.x_future.clone());
        let loss = tape.mse(pred, target).unwrap();
        (tape, loss)
    };
    let (mut tape, loss) = loss_of(model);
    tape.backward(loss).unwrap();
    let analytic: Vec<(contextformer::autodiff::ParamId, Vec<f64>)> = tape
        .param_grads()
        .into_iter()
        .map(|(id, g)| (id, g.to_vec()))
        .collect();
    assert_eq!(analytic.len(), model.store().trainable_ids().len());
    let mut worst: f64 = 0.0;
    for (id, grad) in analytic {
        let x = model.store().value(id).data().to_vec();
        let numeric = numeric_gradient(&x, |probe| {
            model
                .store_mut()
                .value_mut(id)
                .data_mut()
                .copy_from_slice(probe);
            let (t, l) = loss_of(model);
            t.value(l).data()[0]
        });
        model
            .store_mut()
            .value_mut(id)
            .data_mut()
            .copy_from_slice(&x);
        let diff = grad
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        // Attention key biases have identically zero gradient (softmax shift
        // invariance); the floor keeps their comparison absolute.
        let scale = norm(&grad).max(norm(&numeric)).max(GRAD_SCALE_FLOOR);
        worst = worst.max(diff / scale);
    }
    worst
}

/// Small two-block model over 16 steps with one categorical and two
/// continuous metadata columns.
pub fn tiny_config(
    n_channels: usize,
    horizon: usize,
    use_temporal: bool,
) -> contextformer::model::ModelConfig {
    contextformer::model::ModelConfig {
        arch: contextformer::model::ArchitectureConfig {
            d_model: 8,
            n_blocks: 2,
            n_heads: 2,
            patch_len: 4,
            patch_stride: 4,
            ff_dim: 8,
            embed_encoder_layers: 1,
            use_temporal,
            instance_norm: false,
        },
        lookback: 16,
        horizon,
        n_channels,
        schema: contextformer::synth::MetadataSchema {
            categorical_cardinalities: vec![3],
            n_continuous: 2,
        },
    }
}

/// Uniform series, random metadata codes and hourly timestamps.
pub fn random_sample(
    cfg: &contextformer::model::ModelConfig,
    seed: u64,
) -> contextformer::synth::WindowedSample {
    let mut r = rng(seed);
    let (l, t, f) = (cfg.lookback, cfg.horizon, cfg.n_channels);
    let mut meta = Vec::new();
    for _ in 0..l {
        let codes: Vec<usize> = cfg
            .schema
            .categorical_cardinalities
            .iter()
            .map(|&c| r.random_range(0..c))
            .collect();
        let cont: Vec<f64> = (0..cfg.schema.n_continuous)
            .map(|_| r.random_range(-1.0..1.0))
            .collect();
        meta.extend(cfg.schema.encode_row(&codes, &cont).unwrap());
    }
    let start = r.random_range(1_500_000_000..1_700_000_000i64);
    contextformer::synth::WindowedSample {
        x_hist: uniform_tensor(&mut r, &[l, f]),
        c_hist: Some(Tensor::matrix(l, cfg.schema.width(), meta).unwrap()),
        x_future: uniform_tensor(&mut r, &[t, f]),
        timestamps: Some((0..l as i64).map(|i| start + 3600 * i).collect()),
    }
}
