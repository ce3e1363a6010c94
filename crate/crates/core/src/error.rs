use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid latency function: {0}")]
    InvalidLatency(String),

    #[error("link index {index} out of range for a network with {links} links")]
    LinkIndex { index: usize, links: usize },

    #[error("{what} must be nonnegative, got {value}")]
    Domain { what: &'static str, value: f64 },

    #[error("shape mismatch: expected length {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("{solver} did not converge after {iterations} iterations (last residual {residual:e})")]
    NoConvergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },

    #[error("{solver}: root bracket failed ({detail})")]
    Bracket { solver: &'static str, detail: String },

    #[error("integration produced a non-finite state at step {step} (t = {t})")]
    Integration { step: usize, t: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("config line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    #[error("invalid config: {0}")]
    ConfigInvalid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
