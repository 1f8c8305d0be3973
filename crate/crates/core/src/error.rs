//! Error type shared by all numerical modules.

use thiserror::Error;

/// Errors raised by the numerical core.
///
/// Contract violations (shape mismatches, non-finite inputs, invalid
/// arguments) are reported eagerly at the public API boundary so that
/// downstream computations never operate on malformed values.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("{what} must have orthonormal columns (max deviation {deviation:.3e})")]
    NotOrthonormal { what: &'static str, deviation: f64 },

    #[error("singular value iteration failed to converge after {iterations} iterations")]
    SvdNonConvergence { iterations: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at step {step}: loss is not finite")]
    Divergence { step: usize },

    #[error("internal invariant violated: {0}")]
    InvariantViolation(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}
