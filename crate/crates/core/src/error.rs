use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite entry at ({row}, {col}) in {rows}x{cols} matrix")]
    NonFinite {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    #[error("empty matrix ({rows}x{cols})")]
    EmptyMatrix { rows: usize, cols: usize },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("SVD of {rows}x{cols} matrix did not converge within {max_iter} iterations")]
    NoConvergence {
        rows: usize,
        cols: usize,
        max_iter: usize,
    },

    #[error("energy threshold tau={0} outside (0, 1]")]
    InvalidTau(f64),

    #[error("EMA decay beta={0} outside (0, 1)")]
    InvalidBeta(f64),

    #[error("all singular values are zero; rank is undefined")]
    ZeroSpectrum,

    #[error("rank {k} out of range 1..={max}")]
    RankOutOfRange { k: usize, max: usize },

    #[error("reference has zero Frobenius norm")]
    ZeroReference,

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("step {step} does not follow last step {last}")]
    NonMonotoneStep { step: i64, last: i64 },

    #[error("EMA state used before the first update")]
    Uninitialized,

    #[error("history is empty")]
    EmptyHistory,

    #[error("no basis for block {block}, step {step}")]
    MissingBasis { block: usize, step: String },

    #[error(
        "feature shape drift in block {block} at step {step}: expected {expected}, got {actual}"
    )]
    ShapeDrift {
        block: usize,
        step: usize,
        expected: String,
        actual: String,
    },

    #[error("{what} index {index} out of range (len {len})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("report is empty")]
    EmptyReport,

    #[error("need at least {needed} steps, got {got}")]
    TooFewSteps { needed: usize, got: usize },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("unsupported format version {found} in {path} (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("checksum mismatch in {path}: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum {
        path: PathBuf,
        stored: u32,
        computed: u32,
    },

    #[error("invariant violated in {path}: {reason}")]
    Invariant { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
