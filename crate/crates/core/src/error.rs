use thiserror::Error;

/// Errors across the pipeline, grouped so callers can map them to exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or arguments (CLI exit code 2).
    #[error("config: {0}")]
    Config(String),
    /// Shape or grid mismatch between tensors, images, or labels.
    #[error("shape: {0}")]
    Shape(String),
    /// Filesystem failure (CLI exit code 3).
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    /// Malformed file content: bad header, truncated payload, magic mismatch.
    #[error("format: {0}")]
    Format(String),
    /// Numerical failure: non-finite loss, negative eigenvalue beyond tolerance.
    #[error("numeric: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
