//! Error taxonomy shared across the crate.
//!
//! Variants map onto the CLI exit codes: config problems exit 2, data and
//! file-format problems exit 3, numerical failures exit 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not satisfy an operation's contract.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// A scalar argument is outside its valid range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A caller violated an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A NaN or infinity appeared where finite values are required.
    #[error("non-finite value produced by {context}")]
    NonFinite { context: String },

    /// A serialized file is malformed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Dataset-level inconsistency (splits, class sets, missing files).
    #[error("data error: {0}")]
    Data(String),

    /// Run configuration is invalid or contains unknown keys.
    #[error("config error: {0}")]
    Config(String),

    /// A gradient check exceeded its tolerance.
    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(context: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Shape {
            context,
            expected: expected.into(),
            got: got.into(),
        }
    }

    /// Process exit code a CLI should report for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parameter(_) | Error::Contract(_) | Error::Shape { .. } => 2,
            Error::Data(_) | Error::Format { .. } | Error::Io(_) => 3,
            Error::NonFinite { .. } | Error::GradCheck(_) => 4,
        }
    }
}
