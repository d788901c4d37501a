use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller supplied a shape, hyperparameter or index the operation cannot accept.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A model configuration violates one of its invariants. `path` names the field.
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    /// The checkpoint header or manifest is not something this crate writes.
    #[error("format error: {0}")]
    Format(String),

    /// A checkpoint is structurally readable but inconsistent with itself or its config.
    #[error("corrupt checkpoint entry `{tensor}`: {message}")]
    Corrupt { tensor: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad user input rather than the environment or a
    /// damaged file.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::InvalidArgument(_) | Error::Config { .. })
    }
}
