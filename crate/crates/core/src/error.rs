use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    /// A belief or message was queried for moments before it became positive definite.
    #[error("precision matrix is singular or indefinite")]
    SingularPrecision,

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(&'static str),

    #[error("no connected placement found after {attempts} attempts")]
    GenerationFailed { attempts: usize },

    #[error("unknown node id {0}")]
    UnknownNode(usize),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("no measurement for edge ({0}, {1})")]
    MissingMeasurement(usize, usize),

    #[error("model matrix is rank deficient (graph not connected to the reference?)")]
    RankDeficient,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
