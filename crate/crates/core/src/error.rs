use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("non-finite simulator state in layer {layer}, neuron {neuron}")]
    Numerical { layer: usize, neuron: usize },

    #[error("degenerate model: all weights are zero")]
    DegenerateModel,

    #[error("capacity exceeded: network needs {needed} neurons, device offers {available}")]
    Capacity { needed: usize, available: usize },

    #[error("genome has not been evaluated")]
    Unevaluated,

    #[error("evaluator failed: {0}")]
    Evaluator(String),

    #[error("cannot resolve {0}")]
    Unresolved(String),

    #[error("division guard: {0}")]
    Empty(&'static str),
}
