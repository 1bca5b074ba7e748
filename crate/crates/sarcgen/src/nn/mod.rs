//! Minimal f64 tensor/autodiff substrate for the toy encoder-decoder stack.

pub mod check;
pub mod graph;
pub mod params;
pub mod rng;
pub mod tensor;

pub use graph::{Grads, Graph, NodeId};
pub use params::{Adam, ParamSet};
pub use rng::SeededRng;
pub use tensor::Tensor;
