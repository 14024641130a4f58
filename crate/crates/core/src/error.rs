use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library reports. Variants map one-to-one onto the
/// error kinds callers are expected to branch on.
#[derive(Debug, Error)]
pub enum Error {
    /// Input tensor does not match the declared backbone shape.
    #[error("input contract violated: {0}")]
    InputContract(String),

    /// Operation is not valid in the model's current state.
    #[error("illegal state: {0}")]
    IllegalState(String),

    /// Cosine similarity requested against a zero-norm vector.
    #[error("degenerate similarity: {0}")]
    DegenerateSimilarity(String),

    /// Class label sets overlap or a step carries no classes.
    #[error("stream contract violated: {0}")]
    StreamContract(String),

    /// Generic precondition failure on an operation argument.
    #[error("contract violated: {0}")]
    Contract(String),

    /// Loss became non-finite during optimization.
    #[error("training diverged in {phase} phase at epoch {epoch}: {detail}")]
    Divergence {
        phase: String,
        epoch: usize,
        detail: String,
    },

    /// Class counts cannot be split by the requested protocol.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Synthetic data parameters are invalid.
    #[error("dataset spec error: {0}")]
    Spec(String),

    #[error("ingestion error at {path}: {message}")]
    Ingestion { path: PathBuf, message: String },

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("reporting error at {path}: {message}")]
    Reporting { path: PathBuf, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag, used by the CLI error record.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InputContract(_) => "input_contract",
            Error::IllegalState(_) => "illegal_state",
            Error::DegenerateSimilarity(_) => "degenerate_similarity",
            Error::StreamContract(_) => "stream_contract",
            Error::Contract(_) => "contract",
            Error::Divergence { .. } => "divergence",
            Error::Protocol(_) => "protocol",
            Error::Spec(_) => "spec",
            Error::Ingestion { .. } => "ingestion",
            Error::Config { .. } => "config",
            Error::Usage(_) => "usage",
            Error::Reporting { .. } => "reporting",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
