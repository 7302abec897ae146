//! Dense row-major tensors, the numeric kernels the AGGRNet model needs, and
//! a tape-based reverse-mode autodiff engine with a finite-difference checker.
//!
//! Everything is generic over [`Element`] so the same code runs in `f32` for
//! training and in `f64` for gradient checks.

mod element;
mod error;
pub mod gradcheck;
pub mod io;
pub mod ops;
pub mod shape;
mod tape;
mod tensor;

pub use element::{DType, Element};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
