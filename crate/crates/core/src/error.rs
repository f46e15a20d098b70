//! Error type shared across the engine.

use std::path::PathBuf;

/// Errors produced by ingestion, model IO, training and inference.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input data (bad record length, unparsable label line,
    /// truncated or corrupt model file).
    #[error("format error: {0}")]
    Format(String),

    /// Invalid configuration or usage.
    #[error("config error: {0}")]
    Config(String),

    /// A model or state invariant was violated (quantization range,
    /// pack/unpack mismatch, non-finite loss).
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// Tensor shape mismatch between producer and consumer.
    #[error("shape mismatch: {0}")]
    Shape(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn invariant(msg: impl Into<String>) -> Self {
        Error::Invariant(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
