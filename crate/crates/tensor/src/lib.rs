//! Dense `f32`/`f64` tensors with tape-based reverse-mode differentiation.
//!
//! Values live in [`Tensor`]; computations are recorded on a [`Graph`] whose
//! [`Graph::backward`] returns [`Gradients`] for every differentiable leaf.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod scalar;
pub mod suite;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use scalar::Real;
pub use tensor::Tensor;
