//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape or extent mismatch.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A documented precondition was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),
    /// Invalid input data (out-of-range ids, unnormalized distributions, ...).
    #[error("input error: {0}")]
    Input(String),
    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),
    /// Malformed or truncated file.
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    /// Training cannot continue (e.g. spike with no checkpoint to revert to).
    #[error("training aborted: {0}")]
    Aborted(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 contract/config, 2 I/O, 3 aborted run.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_) | Error::Contract(_) | Error::Input(_) | Error::Config(_) => 1,
            Error::Format(_) | Error::Io(_) => 2,
            Error::Aborted(_) => 3,
        }
    }
}
