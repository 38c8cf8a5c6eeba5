use thiserror::Error;

/// Errors raised by the statistics, model and data layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("numerical failure in {stage}: {detail}")]
    Numerical { stage: &'static str, detail: String },

    #[error("{term} produced a non-finite value")]
    NonFinite { term: &'static str },

    #[error("training diverged at epoch {epoch}: {term} is not finite")]
    Diverged { epoch: usize, term: &'static str },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("parse error at row {row}: {detail}")]
    Parse { row: usize, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn numerical(stage: &'static str, detail: impl Into<String>) -> Self {
        Error::Numerical { stage, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
