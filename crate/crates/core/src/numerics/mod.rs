//! Dense tensors, define-by-run reverse-mode differentiation, and a
//! finite-difference gradient checker.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{column_moments, Gradients, Graph, Var, LOG_EPS};
pub(crate) use graph::squared_distance;
pub use tensor::Tensor;
