//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
#[non_exhaustive]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("input contains a non-finite value ({context})")]
    NonFinite { context: &'static str },

    #[error("routing weights off the simplex: sum deviates by {deviation} (layer {layer})")]
    SimplexViolation { deviation: f64, layer: usize },

    #[error("layer index {layer} out of range for {num_layers}-layer model")]
    LayerOutOfRange { layer: usize, num_layers: usize },

    #[error("threshold {value} outside valid range {range}")]
    ThresholdOutOfRange { value: f64, range: &'static str },

    #[error("pathways extracted with different thresholds ({left} vs {right}) are not comparable")]
    MismatchedThreshold { left: f64, right: f64 },

    #[error("need at least {needed} {what}, got {got}")]
    TooFew {
        needed: usize,
        got: usize,
        what: &'static str,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("checkpoint series malformed: {0}")]
    MalformedSeries(String),

    #[error("series has kind {actual} where {expected} is required")]
    SeriesKindMismatch {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: u64, loss: f64 },

    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { pivot: f64, index: usize },

    #[error("matrix is not symmetric within tolerance (max asymmetry {max_asymmetry})")]
    NotSymmetric { max_asymmetry: f64 },

    #[error("eigendecomposition did not converge after {sweeps} sweeps")]
    EigenDidNotConverge { sweeps: usize },

    #[error("eigenvalue {value} violates positive semidefiniteness (tolerance {tolerance})")]
    NotPositiveSemidefinite { value: f64, tolerance: f64 },

    #[error("statistic undefined: {0}")]
    UndefinedStatistic(&'static str),

    #[error("unsupported operation: {0}")]
    Unsupported(&'static str),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Whether the error reflects a numerical failure rather than bad input.
    ///
    /// The CLI maps numerical failures to exit code 2 and everything else
    /// to exit code 1.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Diverged { .. }
                | Error::NotPositiveDefinite { .. }
                | Error::EigenDidNotConverge { .. }
                | Error::NotPositiveSemidefinite { .. }
                | Error::NonFinite { .. }
        )
    }
}
