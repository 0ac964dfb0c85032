use std::path::PathBuf;

use thiserror::Error;

use crate::world::ImageId;

pub type Result<T> = std::result::Result<T, EvoqError>;

#[derive(Debug, Error)]
pub enum EvoqError {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("cannot sample pairs: {0}")]
    InfeasibleSampling(String),

    #[error("unknown image id {0}")]
    UnknownImage(ImageId),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("invalid bin index {bin} (scale has {n_bins} bins)")]
    InvalidBin { bin: usize, n_bins: usize },

    #[error("sampling budget must be at least 1")]
    EmptyBudget,

    #[error("group of {0} rewards is too small to standardize (need at least 2)")]
    GroupTooSmall(usize),

    #[error("image {0} has no pairings; it cannot receive a fidelity reward")]
    ExcludedImage(ImageId),

    #[error("policy diverged: log-ratio {0} overflows")]
    DivergedPolicy(f64),

    #[error("zero probability in KL estimate (p_ref={p_ref}, p_theta={p_theta})")]
    DegenerateSupport { p_ref: f64, p_theta: f64 },

    #[error("ragged batch: group {group} has {actual} records, expected {expected}")]
    BatchShape {
        group: usize,
        expected: usize,
        actual: usize,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("vote on pair ({i}, {j}) failed: {source}")]
    PairVote {
        i: ImageId,
        j: ImageId,
        #[source]
        source: Box<EvoqError>,
    },

    #[error("bridge protocol error: {0}")]
    Protocol(String),

    #[error("bridge request {id} timed out")]
    Timeout { id: u64 },

    #[error("bridge session aborted: {0}")]
    SessionAborted(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Transport(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl EvoqError {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        EvoqError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EvoqError::Io {
            path: path.into(),
            source,
        }
    }
}
