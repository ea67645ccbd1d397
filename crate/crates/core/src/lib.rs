pub mod baselines;
pub mod cell;
pub mod checkpoint;
pub mod error;
pub mod eval;
mod format;
pub mod gradcheck;
pub mod graph;
pub mod network;
pub mod physics;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::Graph;
pub use tensor::Tensor;
