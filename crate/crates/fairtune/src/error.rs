//! Error type shared across the toolkit.
//!
//! Messages carry a `module::operation` prefix at the construction site so a
//! failure names where it happened without a backtrace.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Filesystem failure wrapping the underlying I/O error.
    Io {
        context: String,
        source: std::io::Error,
    },
    /// Malformed or inconsistent input data (bad file formats, line-level
    /// parse failures, mismatched artifacts).
    Data(String),
    /// A caller-supplied value violated an operation's contract.
    InvalidInput(String),
    /// Non-finite values or a diverged computation.
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn data(context: impl Into<String>) -> Self {
        Error::Data(context.into())
    }

    pub fn invalid(context: impl Into<String>) -> Self {
        Error::InvalidInput(context.into())
    }

    pub fn numerical(context: impl Into<String>) -> Self {
        Error::Numerical(context.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io { context, source } => write!(f, "{context}: {source}"),
            Error::Data(msg) => write!(f, "{msg}"),
            Error::InvalidInput(msg) => write!(f, "{msg}"),
            Error::Numerical(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
