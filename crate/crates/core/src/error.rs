use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("size mismatch: expected {expected}, got {actual}")]
    SizeMismatch { expected: usize, actual: usize },

    #[error("coefficient layout mismatch")]
    LayoutMismatch,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}

pub(crate) fn config_error<T>(field: &str, message: impl Into<String>) -> Result<T> {
    Err(Error::Config {
        field: field.to_string(),
        message: message.into(),
    })
}
