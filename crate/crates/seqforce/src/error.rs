//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes or sizes.
    #[error("shape error: {0}")]
    Shape(String),

    /// A caller violated an operation's contract (empty input, non-scalar loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration (e.g. reduction ratio not dividing the channel count).
    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite values, diverging loss, failed gradient check.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// File system / parsing problems.
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// Process exit code for the CLI: 1 contract, 2 i/o, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_) | Error::Contract(_) | Error::Config(_) => 1,
            Error::Io(_) => 2,
            Error::Numerical(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
