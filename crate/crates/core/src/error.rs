use thiserror::Error;

pub type Result<T> = std::result::Result<T, FsldError>;

#[derive(Debug, Error)]
pub enum FsldError {
    /// Bad argument to a library call (index out of range, empty batch, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent container contents.
    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl FsldError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        FsldError::InvalidArgument(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        FsldError::Data(msg.into())
    }
}
