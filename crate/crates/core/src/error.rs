use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, WspError>;

#[derive(Debug, Error)]
pub enum WspError {
    /// Tensor extents that do not fit together.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A caller-side precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    /// Strict one-slice-per-patient sampling cannot fill the batch.
    #[error("strict sampling needs {needed} but only {available} available ({detail}); use the fallback sampler")]
    FallbackRequired {
        needed: usize,
        available: usize,
        detail: String,
    },

    #[error("non-finite value at step {step} in {location}: {detail}")]
    NonFinite {
        step: usize,
        location: String,
        detail: String,
    },
}

impl WspError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        WspError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        WspError::Format {
            offset,
            message: message.into(),
        }
    }
}
