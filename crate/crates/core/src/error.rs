use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed routing trace: {0}")]
    Trace(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}; first non-finite parameter: {param}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        param: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
