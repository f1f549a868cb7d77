//! Dense `f64` tensors with a tape-based reverse-mode autodiff graph.
//!
//! Everything here runs on a single CPU thread and is bit-reproducible for a
//! given sequence of operations. The graph is rebuilt for every forward pass;
//! parameters live outside it in [`ParamSet`]s and are bound as leaves.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod kernels;
pub mod optim;
mod params;
pub mod rng;
mod tensor;

pub use graph::{BoundParams, Grads, Graph, Var};
pub use params::ParamSet;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
