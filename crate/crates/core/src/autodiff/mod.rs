//! Dense tensors and reverse-mode automatic differentiation.

mod check;
mod graph;
mod tensor;

pub use check::{finite_diff_grad, relative_error};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
