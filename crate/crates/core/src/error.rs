//! Error type shared across the crate.
//!
//! Variants map onto the CLI exit codes: configuration problems exit with 2,
//! data problems with 3, numerical failures with 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or dimensions that cannot be combined (implies a wiring or
    /// configuration mistake).
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// A caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid or inconsistent run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Broken, missing, or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// Training diverged or produced non-finite values.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Dim(_) | Error::Contract(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Numerical(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
