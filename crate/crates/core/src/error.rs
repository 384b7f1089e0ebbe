use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unsupported resolution {0} (expected one of {1})")]
    UnsupportedResolution(usize, &'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("grammar cannot produce {requested} distinct sentences (got {produced})")]
    GrammarExhausted { requested: usize, produced: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec: {0}")]
    Image(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{what} did not converge: {metric} = {value:.4} (limit {limit:.4})")]
    NonConvergence {
        what: String,
        metric: String,
        value: f64,
        limit: f64,
    },
    #[error("frozen model {0} was modified")]
    FrozenModelChanged(String),
    #[error("missing model: {0}")]
    MissingModel(String),
    #[error("non-finite objective at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("operation cancelled")]
    Cancelled,
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn shape(expected: impl std::fmt::Debug, found: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch { expected: format!("{expected:?}"), found: format!("{found:?}") }
    }
}
