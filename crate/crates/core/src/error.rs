use thiserror::Error;

/// Errors raised by the reconstruction toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("input is all zero")]
    AllZeroInput,
    #[error("problem size {0} exceeds the direct-summation limit")]
    SizeLimitExceeded(String),
    #[error("value out of range: {0}")]
    RangeViolation(String),
    #[error("expected {expected} arms, got {got}")]
    ArmCountMismatch { expected: usize, got: usize },
    #[error("cached forward state does not match the current parameters")]
    StaleCache,
    #[error("input too short: {0}")]
    TooShortInput(String),
    #[error("reference image is all zero")]
    ZeroReference,
    #[error("step size estimate failed: {0}")]
    NonConvergentStep(String),
    #[error("training diverged: {0}")]
    Divergence(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
