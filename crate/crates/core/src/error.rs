use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("cannot draw {requested} distinct pairs, only {available} available")]
    InsufficientPairs { requested: usize, available: usize },

    #[error("image `{0}` has no meta class but the sampling strategy requires one")]
    MissingMetaClass(String),

    #[error("backend `{backend}` unavailable: {reason}")]
    BackendUnavailable { backend: String, reason: String },

    #[error("empty caption{}", .0.as_ref().map(|id| format!(" for image `{id}`")).unwrap_or_default())]
    EmptyCaption(Option<String>),

    #[error("backend `{0}` returned an empty reformulation")]
    EmptyReformulation(String),

    #[error("synthetic schema has {tuples} attribute tuples, cap is {cap}")]
    SchemaTooLarge { tuples: usize, cap: usize },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("zero vector in row {0}; cosine similarity is undefined")]
    ZeroVector(usize),

    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("lambda must lie in [0, 1], got {0}")]
    LambdaOutOfRange(f64),

    #[error("id `{0}` does not resolve to an image in the collection")]
    DanglingId(String),

    #[error("non-finite loss at step {step} (epoch {epoch}): {detail}")]
    NonFiniteLoss {
        step: u64,
        epoch: usize,
        detail: String,
    },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("embedding for `{0}` is the zero vector")]
    ZeroEmbedding(String),

    #[error("index is empty")]
    EmptyIndex,

    #[error("no ranking for query case {0}")]
    MissingRanking(usize),

    #[error("ground truth `{gt}` missing from subset of case {case}")]
    GtNotInSubset { case: usize, gt: String },

    #[error("report carries no ranked lists")]
    MissingRankedLists,

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    /// True for errors caused by bad user input rather than a failing run.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::SchemaTooLarge { .. }
                | Error::MissingMetaClass(_)
                | Error::InsufficientPairs { .. }
                | Error::LambdaOutOfRange(_)
                | Error::NonPositiveTemperature(_)
        )
    }
}
