//! Dense tensors and a reverse-mode tape.
//!
//! Everything is generic over [`Scalar`]: `f32` for training, `f64` for
//! finite-difference gradient checks.

pub mod gradcheck;
mod kernels;
pub mod mac_counter;
mod scalar;
mod tape;
mod tensor;

pub use scalar::{DType, Scalar};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::perfect_sqrt;

/// Epsilon used by every layer norm site.
pub const LN_EPS: f64 = 1e-6;

#[cfg(test)]
mod tests;
