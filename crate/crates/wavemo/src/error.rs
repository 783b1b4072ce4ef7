use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum WavemoError {
    /// Invalid configuration (bad grid, bad hyperparameters, unknown kind).
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid argument to an operation (shape/length mismatch, empty input).
    #[error("argument error: {0}")]
    Argument(String),

    /// A documented contract was violated (e.g. unnormalized PSF).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Numerical failure: NaN loss, divergence.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// File I/O or format error.
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for WavemoError {
    fn from(e: std::io::Error) -> Self {
        WavemoError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, WavemoError>;
