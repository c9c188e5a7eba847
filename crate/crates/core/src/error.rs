use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid value: {0}")]
    Validation(String),
    #[error("bad configuration: {0}")]
    Config(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("stream protocol violation: {0}")]
    Protocol(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Short machine-readable kind, used by the CLI's `ERROR:<kind>:` prefix.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Validation(_) => "validation",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::Protocol(_) => "protocol",
            Error::Divergence(_) => "divergence",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
