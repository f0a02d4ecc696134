//! Minimal dense tensors with reverse-mode differentiation.

pub mod graph;
pub mod ops;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use ops::ConvSpec;
pub use tensor::Tensor;
