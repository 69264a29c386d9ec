//! Dense `f64` tensors with reverse-mode automatic differentiation.

mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use gradcheck::{finite_difference_at, finite_difference_gradient, relative_error};
pub use graph::{Gradients, Graph, Op, OpKind, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
