use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid kernel spec: {0}")]
    InvalidSpec(String),

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// `pivot` is 1-based.
    #[error("matrix is not positive definite: pivot {pivot} has value {value:e}")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("matrix is not symmetric: max |A_ij - A_ji| = {0:e}")]
    NotSymmetric(f64),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("index {index} out of range 1..={len}")]
    IndexOutOfRange { index: usize, len: usize },

    /// Conditional variance collapsed below the degeneracy threshold.
    #[error("degenerate conditional variance {variance:e} at step {step}; increase jitter")]
    Degenerate { step: usize, variance: f64 },

    #[error("size bound exceeded: {0}")]
    SizeBound(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),
}

impl Error {
    /// True for failures caused by the numbers themselves rather than by
    /// malformed input (used by the CLI to pick an exit code).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. } | Error::Degenerate { .. } | Error::NonFinite(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
