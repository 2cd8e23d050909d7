use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value in {context} at index {index}")]
    NonFinite { context: String, index: usize },

    #[error("training diverged during {stage} at {unit} {step}")]
    Divergence {
        stage: &'static str,
        unit: &'static str,
        step: usize,
    },

    #[error("invalid network config: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no surrogate for slot {slot} kind {kind}")]
    MissingSurrogate { slot: String, kind: String },

    #[error(transparent)]
    Profile(#[from] ProfileError),

    #[error("search space has {count} configurations, above the exhaustive limit of {limit}")]
    SpaceTooLarge { count: u128, limit: u128 },

    #[error("search space exhausted: every configuration has been evaluated")]
    Exhausted,

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("kernel matrix factorization failed even with jitter {jitter:e}")]
    Factorization { jitter: f64 },

    #[error("corrupt artifact {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Validation failures when loading a device latency profile.
#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("malformed profile: {0}")]
    Malformed(String),

    #[error("profile is missing latency for slot {slot} kind {kind}")]
    MissingEntry { slot: String, kind: String },

    #[error("latency for slot {slot} kind {kind} must be positive and finite, got {value}")]
    NonPositive {
        slot: String,
        kind: String,
        value: f64,
    },

    #[error("frozen slot {slot} carries a non-base entry {kind}")]
    FrozenAlternative { slot: String, kind: String },
}
