use thiserror::Error;

/// Errors surfaced by the numerical core. No release-path panics: dimension
/// and definiteness problems come back as values with context.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("covariance is not symmetric")]
    NotSymmetric,
    #[error("invalid parameter {name} = {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },
    #[error("{what} is empty")]
    Empty { what: &'static str },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
