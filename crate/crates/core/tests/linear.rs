mod common;

use common::{normal_equations_solve, rng, uniform_tensor};
use contextformer::autodiff::Tensor;
use contextformer::linear::{
    build_lagged, fit_ar, fit_context_residuals, fit_least_squares, run_context_sweep,
    ContextSource, SweepConfig,
};
use contextformer::synth::LatentArConfig;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn matvec(x: &Tensor, b: &[f64]) -> Vec<f64> {
    (0..x.rows())
        .map(|i| x.row(i).iter().zip(b).map(|(a, c)| a * c).sum())
        .collect()
}

fn gaussian(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

#[test]
fn qr_matches_normal_equations_oracle() {
    let mut r = rng(20);
    for _ in 0..100 {
        let p = r.random_range(1..=10);
        let n = r.random_range(3 * p..=60.max(3 * p));
        let x = Tensor::matrix(n, p, gaussian(&mut r, n * p)).unwrap();
        let y = gaussian(&mut r, n);
        let qr = fit_least_squares(&x, &y).unwrap();
        assert!(qr.warning.is_none());
        let oracle = normal_equations_solve(&x, &y);
        for (a, b) in qr.coefficients.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }
}

#[test]
fn noiseless_system_recovers_coefficients() {
    let mut r = rng(21);
    let x = uniform_tensor(&mut r, &[50, 4]);
    let beta = [0.7, -1.3, 2.0, 0.05];
    let y = matvec(&x, &beta);
    let fit = fit_least_squares(&x, &y).unwrap();
    for (a, b) in fit.coefficients.iter().zip(beta) {
        assert!((a - b).abs() < 1e-8);
    }
}

#[test]
fn noiseless_ar1_is_fitted_exactly() {
    let y: Vec<f64> = (0..100).map(|t| 0.5f64.powi(t) * 3.0).collect();
    let fit = fit_ar(&y, 1).unwrap();
    assert!((fit.beta[0] - 0.5).abs() < 1e-8);
    assert!(fit.e_orig <= 1e-12);
}

#[test]
fn white_noise_keeps_its_energy() {
    let mut r = rng(22);
    let y = gaussian(&mut r, 5000);
    let fit = fit_ar(&y, 2).unwrap();
    let energy: f64 = y[2..].iter().map(|v| v * v).sum();
    assert!((fit.e_orig / energy - 1.0).abs() < 0.01);
}

#[test]
fn paper_sized_ar_fit_has_490_residuals() {
    let mut r = rng(23);
    let y = gaussian(&mut r, 500);
    assert_eq!(build_lagged(&y, 10).unwrap().x.shape(), &[490, 10]);
    assert_eq!(fit_ar(&y, 10).unwrap().residuals.len(), 490);
}

#[test]
fn ar_fit_invariants() {
    let mut r = rng(24);
    for _ in 0..50 {
        let y = gaussian(&mut r, 200);
        let fit = fit_ar(&y, 5).unwrap();
        let norm2: f64 = fit.residuals.iter().map(|v| v * v).sum();
        assert!((fit.e_orig - norm2).abs() <= 1e-9 * norm2);
        let design = build_lagged(&y, 5).unwrap();
        let y_norm = design.y.iter().map(|v| v * v).sum::<f64>().sqrt();
        for j in 0..5 {
            let dot: f64 = design
                .x
                .column(j)
                .iter()
                .zip(&fit.residuals)
                .map(|(a, b)| a * b)
                .sum();
            assert!(dot.abs() <= 1e-6 * y_norm);
        }
    }
}

#[test]
fn context_never_increases_error_on_random_instances() {
    let mut r = rng(25);
    for _ in 0..1000 {
        let len = r.random_range(30..120);
        let p = r.random_range(1..5);
        let q = r.random_range(1..6);
        let y = gaussian(&mut r, len);
        let ar = fit_ar(&y, p).unwrap();
        let c = Tensor::matrix(ar.n(), q, gaussian(&mut r, ar.n() * q)).unwrap();
        let fit = fit_context_residuals(&ar, &c).unwrap();
        assert!(fit.e_new <= ar.e_orig + 1e-9);
        let fitted = matvec(&c, &fit.gamma);
        let resid: Vec<f64> = ar
            .residuals
            .iter()
            .zip(&fitted)
            .map(|(a, b)| a - b)
            .collect();
        for j in 0..q {
            let dot: f64 = c.column(j).iter().zip(&resid).map(|(a, b)| a * b).sum();
            assert!(dot.abs() <= 1e-6 * ar.e_orig.sqrt().max(1.0));
        }
    }
}

#[test]
fn dominant_latent_explains_most_residual_error() {
    let mut r = rng(26);
    let n = 400;
    let latent = gaussian(&mut r, n);
    let noise = gaussian(&mut r, n);
    let y: Vec<f64> = latent
        .iter()
        .zip(&noise)
        .map(|(c, e)| 50.0 * c + e)
        .collect();
    let ar = fit_ar(&y, 3).unwrap();
    let c = Tensor::matrix(ar.n(), 1, latent[3..].to_vec()).unwrap();
    let fit = fit_context_residuals(&ar, &c).unwrap();
    assert!(fit.e_new / ar.e_orig < 0.1);
}

fn sweep(n: usize, weight_scale: f64, context: ContextSource) -> Vec<f64> {
    let cfg = SweepConfig {
        data: LatentArConfig {
            n_sequences: n,
            weight_scale,
            seed: 27,
            ..Default::default()
        },
        context,
        ..Default::default()
    };
    run_context_sweep(&cfg)
        .unwrap()
        .iter()
        .map(|r| r.mean_mse)
        .collect()
}

#[test]
fn sweep_is_non_increasing_and_deterministic() {
    let a = sweep(40, 1.0, ContextSource::Latent);
    assert_eq!(a.len(), 6);
    assert!(a.windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(a, sweep(40, 1.0, ContextSource::Latent));
    let noise = sweep(40, 1.0, ContextSource::Noise);
    assert!(noise.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn silent_latents_leave_the_curve_flat() {
    let mse = sweep(40, 0.0, ContextSource::Latent);
    for v in &mse {
        assert!((v / mse[0] - 1.0).abs() < 0.02, "{mse:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn residual_regression_is_feasible(seed in any::<u64>(), len in 20usize..100, p in 1usize..4, q in 1usize..5, scale in 1e-3f64..1e3) {
        let mut r = rng(seed);
        let y: Vec<f64> = gaussian(&mut r, len).into_iter().map(|v| v * scale).collect();
        let ar = fit_ar(&y, p).unwrap();
        let c = Tensor::matrix(ar.n(), q, gaussian(&mut r, ar.n() * q)).unwrap();
        let fit = fit_context_residuals(&ar, &c).unwrap();
        prop_assert!(fit.e_new <= ar.e_orig + 1e-9);
        prop_assert_eq!(fit.gamma.len(), q);
    }
}
