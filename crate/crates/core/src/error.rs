//! Crate-wide error type.

use std::path::PathBuf;

/// Error type shared by all modules.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition on an operation's inputs was violated (out-of-range
    /// index, empty group, non-positive temperature, token outside the
    /// vocabulary, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid configuration. Reported before any work starts and mapped to
    /// exit code 1 by the CLI.
    #[error("configuration error: {0}")]
    Config(String),

    /// A file could not be parsed (checkpoint, dataset, config syntax).
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    /// I/O failure with the path that caused it.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }

    /// True for errors that should be reported as invalid input rather than
    /// a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
