//! Context-aware time-series forecasting.
//!
//! Two routes to using exogenous context: a closed-form autoregressive model
//! refined by regressing its residuals on context ([`linear`]), and a
//! patch-based transformer whose frozen encoder is extended with
//! zero-initialised cross-attention over metadata and timestamp embeddings
//! ([`model`], trained by [`train`]). Synthetic datasets come from [`synth`].

pub mod autodiff;
pub mod linear;
pub mod model;
pub mod rng;
pub mod synth;
pub mod train;
