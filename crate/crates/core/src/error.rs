use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or hyperparameters that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input too short: {len} samples, need at least {min}")]
    InputTooShort { len: usize, min: usize },

    /// The caller violated an operation's contract (e.g. non-scalar loss).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid reference: {0}")]
    InvalidReference(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(
        "non-finite loss at epoch {epoch}, step {step} (lr {lr:e}, last grad norm {grad_norm:e})"
    )]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        lr: f64,
        grad_norm: f64,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::InputTooShort { .. } => "input-too-short",
            Error::Usage(_) => "usage",
            Error::InvalidReference(_) => "invalid-reference",
            Error::Format { .. } => "format",
            Error::Data(_) => "data",
            Error::Internal(_) => "internal",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::Io { .. } => "io",
        }
    }
}
