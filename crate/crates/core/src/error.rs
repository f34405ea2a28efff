use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or parameter shapes do not line up for an operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Invalid configuration value or combination.
    #[error("invalid config: {0}")]
    Config(String),

    /// Dataset-level inconsistency (label counts, singleton classes, ...).
    #[error("data error: {0}")]
    Data(String),

    /// I/O failure, annotated with the path involved.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed file contents (bad magic, truncation, version mismatch).
    #[error("format error: {0}")]
    Format(String),

    /// Training produced a non-finite loss; carries the offending batch.
    #[error("non-finite loss {loss} at epoch {epoch}, step {step}; batch {batch}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        loss: f64,
        batch: String,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
