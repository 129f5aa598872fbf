//! Error type shared across the crate.

use std::path::PathBuf;

/// Errors surfaced by corpus ingestion, feature providers, training and
/// estimation.
#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record {path}: {reason}")]
    MalformedRecord { path: PathBuf, reason: String },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("no votes: submission {0} has no scored reviews")]
    NoVotes(String),

    #[error("degenerate labels: {0}")]
    SingleClass(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("solver did not converge: {0}")]
    NoConvergence(String),

    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),

    #[error("cache miss for {text_hash} under model {model_id}")]
    CacheMiss { model_id: String, text_hash: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("surrogate query failed on masked text {masked_text:?}: {source}")]
    SurrogateQuery {
        masked_text: String,
        #[source]
        source: Box<CoreError>,
    },

    #[error("reports are not comparable: {0}")]
    Incomparable(String),

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        CoreError::Json {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
