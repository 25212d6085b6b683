//! ARMA(2,2) specification, stability screening and simulation.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::SynthError;

/// Steps simulated and discarded before any value is emitted.
pub const BURN_IN: usize = 200;

/// Whether the recursion `y_t = c_1 y_{t-1} + … + c_k y_{t-k}` is stationary,
/// i.e. every eigenvalue of its companion matrix lies strictly inside the unit
/// circle.
///
/// Uses the Durbin–Levinson step-down recursion: the polynomial is stable iff
/// every reflection coefficient has modulus below one.
pub fn is_stable(coeffs: &[f64]) -> bool {
    let mut a = coeffs.to_vec();
    while let Some(&k) = a.last() {
        // Written so that NaN also fails.
        if !(k.abs() < 1.0) {
            return false;
        }
        let p = a.len();
        let denom = 1.0 - k * k;
        a = (0..p - 1)
            .map(|i| (a[i] + k * a[p - 2 - i]) / denom)
            .collect();
    }
    true
}

/// Coefficients of `y_t = φ₁y_{t−1} + φ₂y_{t−2} + ε_t + θ₁ε_{t−1} + θ₂ε_{t−2}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmaSpec {
    pub phi: [f64; 2],
    pub theta: [f64; 2],
    pub noise_var: f64,
}

impl ArmaSpec {
    pub fn is_stationary(&self) -> bool {
        is_stable(&self.phi)
    }

    /// The MA polynomial `1 + θ₁B + θ₂B²` has all roots outside the unit circle.
    pub fn is_invertible(&self) -> bool {
        is_stable(&[-self.theta[0], -self.theta[1]])
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.noise_var > 0.0 && self.noise_var.is_finite()) {
            return Err(SynthError::InvalidConfig(format!(
                "innovation variance must be positive, got {}",
                self.noise_var
            )));
        }
        if !self.is_stationary() || !self.is_invertible() {
            return Err(SynthError::UnstableSpec(*self));
        }
        Ok(())
    }

    /// Draws coefficients uniformly from [−1, 1]⁴ until the process is both
    /// stationary and invertible.
    pub fn sample_uniform<R: Rng + ?Sized>(rng: &mut R, noise_var: f64) -> Self {
        loop {
            let spec = Self {
                phi: [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)],
                theta: [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)],
                noise_var,
            };
            if spec.is_stationary() && spec.is_invertible() {
                return spec;
            }
        }
    }

    /// The four coefficients in `[φ₁, φ₂, θ₁, θ₂]` order.
    pub fn coefficients(&self) -> [f64; 4] {
        [self.phi[0], self.phi[1], self.theta[0], self.theta[1]]
    }
}

/// Simulates `length` values after a [`BURN_IN`]-step warm-up.
pub fn sample_arma<R: Rng + ?Sized>(
    spec: &ArmaSpec,
    length: usize,
    rng: &mut R,
) -> Result<Vec<f64>, SynthError> {
    spec.validate()?;
    let noise = Normal::new(0.0, spec.noise_var.sqrt()).expect("validated variance");
    let (mut y1, mut y2, mut e1, mut e2) = (0.0, 0.0, 0.0, 0.0);
    let mut out = Vec::with_capacity(length);
    for step in 0..BURN_IN + length {
        let e = noise.sample(rng);
        let y = spec.phi[0] * y1 + spec.phi[1] * y2 + e + spec.theta[0] * e1 + spec.theta[1] * e2;
        (y2, y1, e2, e1) = (y1, y, e1, e);
        if step >= BURN_IN {
            out.push(y);
        }
    }
    Ok(out)
}
