use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("covariance is not symmetric positive definite: {0}")]
    NotSpd(String),

    #[error("matrix is singular or ill-posed (condition number {condition:e})")]
    Singular { condition: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("all importance weights are numerically zero (max log-weight {max_log_weight}, min cost {min_cost})")]
    DegenerateWeights { max_log_weight: f64, min_cost: f64 },

    #[error("non-positive m.s.e. {mse} at d = {d} cannot enter a log-linear fit")]
    NonPositiveMse { d: usize, mse: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
