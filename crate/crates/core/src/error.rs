use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },

    #[error("dictionary of {requested} atoms exceeds the budget of {budget}")]
    AtomBudgetExceeded { requested: u128, budget: u64 },

    #[error("parameter budget {requested} is below the minimum achievable {minimum}")]
    InfeasibleBudget { requested: u64, minimum: u64 },

    #[error("training diverged at batch {batch}: loss is {loss}")]
    Diverged { batch: usize, loss: f64 },

    #[error("optimizer step requested before a backward pass")]
    StepBeforeBackward,

    #[error("container format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
