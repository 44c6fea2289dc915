use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left_rows}x{left_cols} vs {right_rows}x{right_cols}")]
    ShapeMismatch {
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid backbone config: {0}")]
    InvalidConfig(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("reuse requested at step {step}, layer {layer}, family `{family}` but the cache slot is empty")]
    EmptyCacheSlot {
        step: usize,
        layer: usize,
        family: String,
    },

    #[error("forward_step called with a step-skip directive at step {0}")]
    StepSkipDirective(usize),

    #[error("non-finite state at step {0}")]
    NonFinite(usize),

    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("plan invariant `{invariant}` violated at {field}")]
    PlanInvariant { invariant: String, field: String },

    #[error("unsupported format version {found}; supported: {supported:?}")]
    UnsupportedVersion { found: u32, supported: Vec<u32> },

    #[error("malformed {what}: {detail}")]
    Malformed { what: String, detail: String },

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invariant(invariant: impl Into<String>, field: impl Into<String>) -> Self {
        Error::PlanInvariant {
            invariant: invariant.into(),
            field: field.into(),
        }
    }

    pub(crate) fn malformed(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Malformed {
            what: what.into(),
            detail: detail.into(),
        }
    }
}
