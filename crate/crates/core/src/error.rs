use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates a structural constraint.
    #[error("configuration error: {0}")]
    Config(String),

    /// An argument or data value is outside the operation's domain.
    #[error("input error: {0}")]
    Input(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Broken internal invariant, e.g. mismatched gradient shapes.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
