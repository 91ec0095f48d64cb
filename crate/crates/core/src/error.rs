use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{count} tokens exceed the layout capacity of {capacity}")]
    TooManyTokens { count: usize, capacity: usize },

    #[error("dataset has fewer than two real tokens")]
    EmptyDataset,

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown label {0:?}")]
    UnknownLabel(String),

    #[error("expected dimension {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("only {rank} nonzero singular values, {requested} components requested")]
    RankDeficient { rank: usize, requested: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("token index {index} out of range for {capacity} tokens")]
    IndexOutOfRange { index: usize, capacity: usize },

    #[error("invalid constraint: {0}")]
    InvalidConstraint(String),

    #[error("empty group: {0}")]
    EmptyGroup(String),

    #[error("{points} points is too few for {folds}-fold cross validation")]
    TooFewPoints { points: usize, folds: usize },

    #[error("no evaluable (prompt, label) pairs")]
    NoEvaluablePairs,

    #[error("no comparable box pairs")]
    NoComparablePairs,

    #[error("rejection sampling gave up after {0} attempts")]
    RejectionOverflow(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
