use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the stack.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand extents are incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Patch geometry does not tile the image exactly.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// A configuration value violates its documented range.
    #[error("configuration error: {0}")]
    Config(String),

    /// The autodiff API was used out of contract.
    #[error("usage error: {0}")]
    Usage(String),

    /// Dataset files are missing or malformed.
    #[error("ingestion error in {}: {message}", path.display())]
    Ingestion { path: PathBuf, message: String },

    /// Checkpoint file could not be decoded or does not fit the model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A gradient or loss became NaN or infinite.
    #[error("numeric failure in `{param}`: max |g| = {max_abs}")]
    NonFinite { param: String, max_abs: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
