use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("singular matrix: largest available pivot {pivot:e} at column {column}")]
    SingularMatrix { column: usize, pivot: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("unequal sample counts: {0} vs {1}")]
    UnequalCounts(usize, usize),

    #[error("batch too small: need at least {need} samples, got {got}")]
    BatchTooSmall { need: usize, got: usize },

    #[error("witness precondition violated: {0}")]
    WitnessPreconditionViolated(String),

    #[error("assumption violated ({assumption}): {detail}")]
    AssumptionViolated { assumption: String, detail: String },

    #[error("LP did not reach an optimum: {0}")]
    LpStatus(String),

    #[error("gradient tape already consumed")]
    TapeReused,

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("item {0} was already recommended in this episode")]
    RepeatedItem(usize),

    #[error("episode already finished")]
    EpisodeFinished,

    #[error("no valid actions remain")]
    NoValidActions,

    #[error("empty batch")]
    EmptyBatch,

    #[error("degenerate data: total variance {0:e}")]
    DegenerateData(f64),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
