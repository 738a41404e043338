use thiserror::Error;

/// Errors returned by the library surface.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A precondition on an argument was violated (empty input, bad shape, α out of range, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An operation was called on a value that lacks the state it needs.
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// Configuration could not be parsed or validated.
    #[error("invalid config: {0}")]
    Config(String),

    #[error("io error: {0}")]
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
