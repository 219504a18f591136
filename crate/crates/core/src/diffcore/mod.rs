//! Dense tensors and a tape-based reverse-mode autodiff engine.

pub mod gradcheck;
pub mod graph;
mod real;
mod tensor;

pub use graph::{inject_sign_fault, injected_sign_fault, Gradients, Graph, OpKind, Var, PAD_ROW};
pub use real::{DType, Real};
pub use tensor::Tensor;
