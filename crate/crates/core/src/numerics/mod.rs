//! Dense tensors with tape-based reverse-mode differentiation.

mod graph;
mod optim;
mod tensor;

pub(crate) use graph::bilinear_taps;
pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use tensor::{Element, Tensor};
