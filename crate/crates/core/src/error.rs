use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the diagnostics toolkit.
///
/// The variants fall into three families that callers (notably the CLI) map
/// onto distinct exit statuses: configuration problems, model evaluation
/// failures, and numerical degeneracies in the data handed to a metric.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid model specification: field `{field}`: {reason}")]
    ModelSpec { field: String, reason: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("{model} requires at least {required} input features, got {actual}")]
    DimensionTooSmall {
        model: &'static str,
        required: usize,
        actual: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("model evaluation failed at row {row}: {reason}")]
    ModelEval { row: usize, reason: String },

    #[error("replicate {replicate}: {source}")]
    Replicate {
        replicate: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("feature column {column} has zero variance")]
    DegenerateFeature { column: usize },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("degenerate regressor: {0}")]
    DegenerateRegressor(&'static str),

    #[error("not enough samples: need at least {required}, got {actual}")]
    TooFewSamples { required: usize, actual: usize },

    #[error("all {0} sample pairs are degenerate (coincident points)")]
    DegeneratePairs(usize),

    #[error("study aborted: {failed} of {total} points failed")]
    StudyAborted { failed: usize, total: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn spec(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::ModelSpec {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the error originated in evaluating a model rather than in
    /// configuration or data validation.
    pub fn is_model_failure(&self) -> bool {
        match self {
            Error::ModelEval { .. } => true,
            Error::Replicate { source, .. } => source.is_model_failure(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
