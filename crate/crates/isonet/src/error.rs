use thiserror::Error;

/// Crate-wide error type. Domain violations carry enough context to be
/// reported verbatim by the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("divisibility error: {0}")]
    Divisibility(String),

    #[error("architecture error: {0}")]
    Arch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn divisibility(msg: impl Into<String>) -> Self {
        Error::Divisibility(msg.into())
    }

    pub fn arch(msg: impl Into<String>) -> Self {
        Error::Arch(msg.into())
    }
}
