use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library reports.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("unsupported primitive `{0}`")]
    UnsupportedPrimitive(String),
    #[error("integration produced a non-finite value at substep {substep}")]
    Integration { substep: usize },
    #[error("query point ({x}, {y}) lies outside the box")]
    OutOfBox { x: f64, y: f64 },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated inside record {record} (byte offset {offset})")]
    Truncated { record: u64, offset: u64 },
    #[error("malformed data: {0}")]
    Malformed(String),
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse, machine-readable classification of an [`Error`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(i32)]
pub enum ErrorCategory {
    Contract = 1,
    Numeric = 2,
    Format = 3,
    Config = 4,
    Data = 5,
    Io = 6,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Contract => "contract",
            ErrorCategory::Numeric => "numeric",
            ErrorCategory::Format => "format",
            ErrorCategory::Config => "config",
            ErrorCategory::Data => "data",
            ErrorCategory::Io => "io",
        }
    }

    /// Process exit code used by the CLI.
    pub fn exit_code(self) -> i32 {
        10 + self as i32
    }
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Shape(_)
            | Error::UnsupportedPrimitive(_)
            | Error::OutOfBox { .. }
            | Error::Invalid(_) => ErrorCategory::Contract,
            Error::NonFinite(_) | Error::Integration { .. } => ErrorCategory::Numeric,
            Error::BadMagic { .. }
            | Error::UnsupportedVersion(_)
            | Error::Truncated { .. }
            | Error::Malformed(_) => ErrorCategory::Format,
            Error::UnknownKey(_) | Error::Config(_) => ErrorCategory::Config,
            Error::InsufficientData(_) => ErrorCategory::Data,
            Error::Io(_) => ErrorCategory::Io,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
