//! Crate-wide error and result types.
//!
//! Errors are grouped into categories that map onto process exit codes at the
//! CLI boundary: configuration/usage errors exit with code 2, everything else
//! with code 1.

/// Error type shared by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    /// A bundle header line (or other line-oriented input) failed to parse.
    #[error("format error at line {line}: {message}")]
    Format {
        /// 1-based line number within the offending file.
        line: usize,
        /// Parser diagnostic.
        message: String,
    },
    /// Byte-level accounting of a binary payload does not match its header.
    #[error("integrity error: {0}")]
    Integrity(String),
    /// A domain invariant was violated by otherwise well-formed data.
    #[error("validation error: {0}")]
    Validation(String),
    /// A configuration value (file or flag) is unusable.
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    /// Process exit code for this error at the CLI boundary.
    ///
    /// Configuration and usage problems exit 2; internal failures exit 1.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}

/// Convenience result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand for building a validation error from format arguments.
macro_rules! validation {
    ($($arg:tt)*) => {
        $crate::error::Error::Validation(format!($($arg)*))
    };
}

/// Shorthand for building a config error from format arguments.
macro_rules! config_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Config(format!($($arg)*))
    };
}

pub(crate) use config_err;
pub(crate) use validation;
