//! Minimal dense reverse-mode differentiation over `f64` tensors.

pub mod checkpoint;
mod graph;
mod optim;
mod tensor;

pub use graph::{Graph, Op, Var};
pub(crate) use graph::invert3;
pub use optim::{Adam, DEFAULT_BETAS, DEFAULT_LR};
pub use tensor::Tensor;
