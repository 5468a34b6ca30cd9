//! Crate-wide error type.
//!
//! Errors split into four families: precondition violations
//! ([`Error::InvalidArgument`]), on-disk format problems that name the
//! offending byte offset ([`Error::Format`]), numerical-domain failures
//! such as zero-norm embeddings or non-finite losses
//! ([`Error::Numerical`]), and I/O errors that keep the path they
//! occurred on.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violated a documented precondition.
    #[error("invalid argument: {message}")]
    InvalidArgument { message: String },

    /// A container, checkpoint, or config file failed to parse.
    #[error("{}: format error at byte {offset}: {message}", path.display())]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    /// A computation left its numerical domain (zero norms, NaN loss).
    #[error("numerical domain error in {operation}: {message}")]
    Numerical {
        operation: &'static str,
        message: String,
    },

    /// An I/O failure, annotated with the path involved.
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument {
            message: message.into(),
        }
    }

    pub fn format(path: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            message: message.into(),
        }
    }

    pub fn numerical(operation: &'static str, message: impl Into<String>) -> Self {
        Error::Numerical {
            operation,
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 for validation errors (bad
    /// arguments or config), 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument { .. } => 1,
            Error::Format { .. } | Error::Numerical { .. } | Error::Io { .. } => 2,
        }
    }
}
