use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DpqError>;

#[derive(Debug, Error)]
pub enum DpqError {
    #[error("non-finite value {value} in {context}")]
    NonFinite { value: f64, context: &'static str },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("nibble value {0} does not fit in 4 bits")]
    NibbleRange(u32),

    #[error("hessian has not been finalized")]
    NotFinalized,

    #[error("cholesky factorization failed at pivot {pivot} (value {value:e})")]
    Cholesky { pivot: usize, value: f64 },

    #[error("tensor `{name}`: {reason}")]
    Validation { name: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed json: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl DpqError {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        DpqError::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn validation(name: impl Into<String>, reason: impl Into<String>) -> Self {
        DpqError::Validation {
            name: name.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DpqError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line tool.
    ///
    /// 2 = validation failure, 3 = numerical failure, 4 = I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            DpqError::Cholesky { .. } | DpqError::NonFinite { .. } => 3,
            DpqError::Io { .. } => 4,
            _ => 2,
        }
    }
}

pub(crate) fn check_finite(value: f64, context: &'static str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(DpqError::NonFinite { value, context })
    }
}
