//! Dense tensors with reverse-mode differentiation.

mod gradcheck;
mod graph;
pub mod nn;
mod tensor;

pub use gradcheck::{check_ops, grad_check, grad_check_with, relative_error, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Unary, Var, COSINE_EPS, LAYER_NORM_EPS};
#[allow(unused_imports)]
pub(crate) use graph::{sigmoid, softmax_values, softplus};

#[cfg(test)]
mod tests;
pub use tensor::{Real, Tensor};
