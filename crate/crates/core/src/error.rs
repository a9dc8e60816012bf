use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grade record: {0}")]
    InvalidRecord(String),

    #[error("unknown grade letter {0:?}")]
    UnknownLetter(String),

    #[error("row {0} has no observed entries")]
    EmptyRow(usize),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("duplicate entry at row {row}, column {col}")]
    DuplicateEntry { row: usize, col: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("no records at term {0}")]
    MissingTerm(u32),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("stochastic gradient descent diverged (learning rate {0})")]
    Diverged(f64),

    #[error("held-out pair ({student}, {course}) is present in the training data")]
    Leakage { student: String, course: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unknown method {0:?}")]
    UnknownMethod(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
