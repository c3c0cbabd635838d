use std::path::PathBuf;

/// Errors raised across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error at {}: {msg}", path.display())]
    Io { path: PathBuf, msg: String },

    #[error("checkpoint error in field `{field}`: {msg}")]
    Checkpoint { field: String, msg: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, msg: impl std::fmt::Display) -> Self {
        Error::Io { path: path.into(), msg: msg.to_string() }
    }

    pub(crate) fn checkpoint(field: impl Into<String>, msg: impl std::fmt::Display) -> Self {
        Error::Checkpoint { field: field.into(), msg: msg.to_string() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
