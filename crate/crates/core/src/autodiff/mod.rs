//! Dense `f64` tensors with a reverse-mode gradient tape.
//!
//! Covers exactly the operations the forecasters need: matrix products,
//! elementwise arithmetic, softmax, GeLU, layer norm, dropout, concatenation
//! and reductions. Shapes are aligned explicitly; the only broadcast is a row
//! bias added to a matrix.

mod gemm;
mod params;
mod tape;
mod tensor;

pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};
pub use tensor::{Result, Tensor, TensorError};
