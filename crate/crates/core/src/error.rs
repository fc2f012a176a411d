use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the profiling pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: parse error: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("{path}:{line}: invariant violation: {msg}")]
    InvalidRecord { path: PathBuf, line: usize, msg: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("empty trace")]
    EmptyTrace,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("signal is flat (coefficient of variation {cov:.4} below {threshold:.4}); skew is unidentifiable")]
    FlatSignal { cov: f64, threshold: f64 },

    #[error("signal has zero mean; cannot normalize")]
    ZeroMeanSignal,

    #[error("trace spans {len_s} s but at least {need_s} s are required")]
    TraceTooShort { len_s: f64, need_s: f64 },

    #[error("need at least {need} aligned samples, have {have}")]
    InsufficientSamples { have: usize, need: usize },

    #[error("system-wide counters are zero over the whole window")]
    ZeroSystemCounters,

    #[error("unknown function id: {0}")]
    UnknownFunction(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("ground truth is zero for function {0}")]
    ZeroGroundTruth(String),

    #[error("zero vector passed to cosine similarity")]
    ZeroVector,

    #[error("measured power is zero at sample {index}")]
    ZeroMeasuredPower { index: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("starvation: invocation of {function_id} can never be admitted ({msg})")]
    Starvation { function_id: String, msg: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
