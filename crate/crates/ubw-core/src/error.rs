//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any layer of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: domain error, {what}")]
    Domain { op: &'static str, what: String },

    #[error("backward already called on this tape; build a fresh tape to differentiate again")]
    BackwardTwice,

    #[error("tape was recorded in first-order mode; build it with Mode::HigherOrder to differentiate gradients")]
    HigherOrderRequired,

    #[error("expected a scalar tensor, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("invalid parameter {name}: {why}")]
    InvalidParameter { name: &'static str, why: String },

    #[error("label {label} out of range 1..={k}")]
    LabelOutOfRange { label: u32, k: usize },

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("non-finite gradient during {op}")]
    NonFiniteGradient { op: &'static str },

    #[error("degenerate gradient in {op}: {side} gradient has zero norm")]
    DegenerateGradient { op: &'static str, side: &'static str },

    #[error("bi-level optimization diverged in lower-level training at round {round}: {source}")]
    BilevelDivergence {
        round: usize,
        source: Box<Error>,
    },

    #[error("bad magic in {path}: expected {expected:#010x}, found {found:#010x} at offset {offset}")]
    BadMagic {
        path: String,
        expected: u32,
        found: u32,
        offset: u64,
    },

    #[error("truncated payload in {path}: needed {needed} bytes at offset {offset}")]
    Truncated {
        path: String,
        needed: usize,
        offset: u64,
    },

    #[error("count mismatch between {images_path} ({image_count} images) and {labels_path} ({label_count} labels)")]
    CountMismatch {
        images_path: String,
        labels_path: String,
        image_count: usize,
        label_count: usize,
    },

    #[error("malformed dataset container {path}: {why}")]
    BadContainer { path: String, why: String },

    #[error("insufficient correctly-classified samples: requested {requested}, found {found}")]
    InsufficientSamples { requested: usize, found: usize },

    #[error("oracle protocol error: {0}")]
    Protocol(String),

    #[error("architecture {arch} does not support {what}")]
    UnsupportedArch { arch: String, what: &'static str },

    #[error("probability vector invalid: {0}")]
    BadProbability(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
