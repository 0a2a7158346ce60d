use std::io;

use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Input shapes do not conform to what an operation expects.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An argument is outside its valid domain.
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// A NaN or infinite value appeared where finite values are required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A function passed to the gradient checker is not deterministic.
    #[error("function is not deterministic: {0}")]
    NonDeterministic(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// True for numeric failures (NaN/Inf), which the CLI maps to exit code 2.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
