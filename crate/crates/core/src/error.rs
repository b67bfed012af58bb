//! Error type shared across the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed file contents (bad magic, truncated payload, bad CSV row...).
    #[error("format error: {0}")]
    Format(String),

    /// A caller violated an operation's precondition or a type invariant.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Dataset-level problems: missing volumes, mismatched patient ids...
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values where finite math was required. `dump` carries a
    /// JSON description of the offending inputs when available.
    #[error("numerical failure: {context}")]
    NonFinite { context: String, dump: Option<String> },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite { context: context.into(), dump: None }
    }
}
