use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data violates a precondition (non-finite values, empty vectors, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A caller-supplied argument is out of its allowed range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Structurally valid data that fails a semantic check, e.g. a label >= class count.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("config error at line {line}, key `{key}`: {message}")]
    Config {
        key: String,
        line: usize,
        message: String,
    },

    #[error("generation failed: {0}")]
    Generation(String),

    /// A backward pass was handed a cache that does not belong to the parameters.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the user's invocation rather than a runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_) | Error::Config { .. }
        )
    }
}
