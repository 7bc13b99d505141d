use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Two sampled event times coincided exactly; the caller resamples.
    #[error("time collision in sampled configuration")]
    Collision,

    #[error("enumeration budget exceeded: needs {required} terms, budget {budget}")]
    BudgetExceeded { required: u128, budget: u128 },

    #[error("no admissible path: {0}")]
    PathNotFound(String),

    /// An estimator's normalization had zero sampled mass.
    #[error("degenerate estimate: {0}")]
    Degenerate(String),

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
