use std::path::PathBuf;

/// Errors raised across the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}: schema error: {msg}")]
    Schema { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("contrastive batch needs at least 2 rows, got {0}")]
    NeedNegatives(usize),
    #[error("cannot normalize zero-norm row {0}")]
    Normalization(usize),
    #[error("no labeled points")]
    NoLabels,
    #[error("unknown semantic class id {0}")]
    Class(i64),
    #[error("views share only {found} matches, need {required}")]
    InsufficientOverlap { found: usize, required: usize },
    #[error("cannot place trees: {0}")]
    Placement(String),
    #[error("degenerate task: {0}")]
    DegenerateTask(String),
    #[error("species leakage: {0}")]
    Leakage(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("determinism check failed: {0}")]
    Determinism(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
