use thiserror::Error;

/// Errors surfaced by the public API.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid field: {0}")]
    InvalidField(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("time {t} outside control horizon [0, {horizon}]")]
    OutsideHorizon { t: f64, horizon: f64 },
    #[error("hypothesis violated: {0}")]
    HypothesisViolated(String),
    #[error("unsupported functional: {0}")]
    UnsupportedFunctional(String),
    #[error("estimation failed: {0}")]
    EstimationFailure(String),
}

pub type Result<T> = std::result::Result<T, Error>;
