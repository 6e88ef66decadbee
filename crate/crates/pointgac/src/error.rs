use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the pipeline.
///
/// `InvalidArgument` covers precondition violations (the caller passed
/// something the operation cannot work with), everything else is an IO or
/// runtime failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("point {point} has label {label} but no center carries that label")]
    UnassignablePoint { point: usize, label: u32 },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("not implemented: {0}")]
    NotImplemented(&'static str),

    #[error("runtime fault: {0}")]
    Fault(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True when the error is a validation failure rather than a runtime
    /// fault; the CLI maps the former to exit code 1 and the latter to 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_) | Error::UnassignablePoint { .. } | Error::Parse { .. }
        )
    }
}
