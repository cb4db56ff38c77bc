use thiserror::Error;

/// Errors produced across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm below 1e-12; cannot normalize")]
    ZeroVector,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("batch normalization in training mode needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),

    #[error("non-finite gradient: {0}")]
    NonFiniteGradient(String),

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("batch lacks second-subject anchor/positive rows required by {0}")]
    MissingSecondSubject(String),

    #[error("no valid quadruplets: {0}")]
    NoValidQuadruplets(String),

    #[error("unknown sample: {0}")]
    UnknownSampleId(String),

    #[error("comparison class `{0}` has no pairs")]
    EmptyProtocolCell(String),

    #[error("score list `{0}` is empty")]
    EmptyScoreList(String),

    #[error("input out of range: {0}")]
    OutOfRangeInput(String),

    #[error("training class `{0}` is empty")]
    EmptyClass(String),

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("protocol infeasible: {0}")]
    ProtocolInfeasible(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dims(expected: usize, found: usize) -> Self {
        Error::DimensionMismatch { expected, found }
    }
}
