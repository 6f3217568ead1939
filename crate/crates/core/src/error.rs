use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An operation was called out of order, e.g. backward before forward.
    #[error("state error: {0}")]
    State(String),

    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("non-finite values produced by layer `{layer}`")]
    Overflow { layer: String },

    #[error("training diverged at epoch {epoch}, iteration {iteration}: {reason}")]
    Divergence {
        epoch: usize,
        iteration: usize,
        reason: String,
    },

    #[error("layer `{layer}` produced zero output variance")]
    SingularInit { layer: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(path: impl AsRef<std::path::Path>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            message: msg.into(),
        }
    }
}
