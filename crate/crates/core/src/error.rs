use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The vector handed to a pseudo-inverse quadratic form has a component
    /// outside the range of the metric.
    #[error("vector outside metric range (relative residual {residual:.3e})")]
    OutOfRange { residual: f64 },

    #[error("training failed: {0}")]
    TrainingFailure(String),

    #[error("degenerate attack: {0}")]
    DegenerateAttack(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed document: {0}")]
    Format(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
