use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A task, contract or experiment specification violates one of its bounds.
    #[error("invalid specification: {0}")]
    Spec(String),

    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),

    #[error("instantiation error: {0}")]
    Instantiation(String),

    #[error("pipeline state error: {0}")]
    State(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("unknown candidate id {0}")]
    Lookup(String),

    #[error("genome validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("verification mismatch: {0}")]
    Verification(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}
