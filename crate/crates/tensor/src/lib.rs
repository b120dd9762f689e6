//! Dense n-dimensional tensors and a define-by-run reverse-mode gradient tape.
//!
//! Values live in [`Tensor`]; computation is recorded on a [`Graph`] which hands
//! out copyable [`Var`] handles. A graph is rebuilt for every forward pass and
//! is generic over the scalar type so the same model code runs in `f32` for
//! training and `f64` for finite-difference verification.

mod error;
pub mod gradcheck;
mod graph;
pub mod index;
mod ops;
mod real;
mod tensor;

pub use error::TensorError;
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{Graph, Var};
pub use real::Real;
pub use tensor::Tensor;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
