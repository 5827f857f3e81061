use thiserror::Error;

use crate::integrate::IntegrationError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("basis index {index} out of range (highest index is {max})")]
    IndexOutOfRange { index: usize, max: usize },

    #[error("tau = {0} lies outside [0, 1]")]
    TauOutOfRange(f64),

    #[error("malformed piecewise polynomial: {0}")]
    MalformedPolynomial(String),

    #[error("degenerate basis: p{index} has norm {norm:e} before normalization")]
    DegenerateBasis { index: usize, norm: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("t = {t} outside trajectory span [{start}, {end}]")]
    OutsideSpan { t: f64, start: f64, end: f64 },

    #[error("reference solution has zero L2 norm on the error window")]
    DegenerateReference,

    #[error("{context}: {source}")]
    Solve {
        context: String,
        #[source]
        source: IntegrationError,
    },

    #[error("ripple initialization did not converge after {iterations} Newton iterations (residual {residual:e})")]
    Initialization { iterations: usize, residual: f64 },

    #[error("matched-accuracy search failed: {0}")]
    MatchedAccuracy(String),
}
