use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("constraint violation: weights sum {sum} exceeds budget {budget} (or a negative component)")]
    ConstraintViolation { sum: f64, budget: f64 },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("particle weights degenerated: all reweighted weights underflowed")]
    Degenerate,

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("non-finite loss at sample {index}: {value}")]
    NonFiniteLoss { index: usize, value: f64 },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("grid error: {0}")]
    Grid(String),

    #[error("unavailable policy: {0}")]
    MissingPolicy(String),

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
