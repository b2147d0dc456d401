use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform.
    #[error("dimension mismatch in {context}: {detail}")]
    Dimension { context: &'static str, detail: String },

    /// An input lies outside the domain of the operation (singular matrix,
    /// non-positive determinant, out-of-range index).
    #[error("domain error: {0}")]
    Domain(String),

    /// A numerical routine failed on otherwise valid input.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A configuration or model invariant does not hold.
    #[error("invalid `{field}`: {reason}")]
    Validation { field: String, reason: String },

    /// An iterative method ran out of iterations.
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at line {line}, column {column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
}

impl Error {
    pub(crate) fn dim(context: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            context,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad input rather than failed numerics.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation { .. } | Error::Parse { .. } | Error::Io { .. } | Error::Dimension { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
