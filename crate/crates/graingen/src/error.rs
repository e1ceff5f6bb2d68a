//! Crate-wide error type.

use thiserror::Error;

/// Unified error for all pipeline stages.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or layer was fed data of the wrong shape.
    #[error("shape contract violated in {context}: {message}")]
    Shape { context: String, message: String },

    /// A numeric value that must be finite was NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Geometric precondition failed (degenerate input, too few points, ...).
    #[error("geometry: {0}")]
    Geometry(String),

    /// A dataset or ingest precondition failed.
    #[error("dataset: {0}")]
    Dataset(String),

    /// A stored artifact is malformed or of the wrong version.
    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    /// A pipeline stage was invoked before its upstream artifact exists.
    #[error("missing upstream artifact {artifact}; run `{produced_by}` first")]
    Dependency { artifact: String, produced_by: String },

    /// Run configuration is invalid.
    #[error("config: {0}")]
    Config(String),

    /// Simulation failed to converge or aborted.
    #[error("simulation: {0}")]
    Simulation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Shape { context: context.into(), message: message.into() }
    }

    pub(crate) fn format(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
