use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("control input {value} outside [{min}, {max}]")]
    ControlOutOfBounds { value: f64, min: f64, max: f64 },

    #[error("invalid bounds: {0}")]
    InvalidBounds(String),

    #[error("collision: gap {gap:.6} m")]
    Collision { gap: f64 },

    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparameters(String),

    #[error("invalid training set: {0}")]
    InvalidTrainingSet(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty candidate grid")]
    EmptyGrid,

    #[error("matrix is not invertible even after jitter")]
    Singular,

    #[error("cache operation needs at least {needed} rows, has {have}")]
    CacheTooSmall { needed: usize, have: usize },

    #[error("step tag {tag} precedes the last cached tag {last}")]
    TagOrder { tag: i64, last: i64 },

    #[error("degenerate sampling: {rejected} of {offered} new points rejected")]
    DegenerateSampling { rejected: usize, offered: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
