use thiserror::Error;

use crate::routing::RoutingError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("encoder-decoder attention requested without encoder memory")]
    MissingMemory,
    #[error("encoder memory is fully padded for instance {0}")]
    EmptyMemory(usize),
    #[error("sequence of length {len} exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("{0}: empty batch")]
    EmptyBatch(&'static str),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid task: {0}")]
    Task(String),
    #[error("non-finite gradient for parameter {param} at index {index}")]
    NonFiniteGradient { param: String, index: usize },
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
