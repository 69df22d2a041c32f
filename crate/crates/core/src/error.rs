//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CsrlError {
    /// Shape or dimension disagreement between arrays.
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    /// A non-finite value (NaN or Inf) surfaced during computation.
    /// The op name pins down where the tape went bad.
    #[error("non-finite value produced by op `{op}` (node {node})")]
    NonFinite { op: String, node: usize },

    /// Tape misuse: backward from a non-scalar, unknown node, etc.
    #[error("tape error: {0}")]
    Tape(String),

    /// Unknown task head index.
    #[error("unknown task index {index} (network has {heads} heads)")]
    UnknownTask { index: usize, heads: usize },

    /// Environment stepped past the fixed episode horizon.
    #[error("episode already finished (step counter at {step})")]
    EpisodeDone { step: u32 },

    /// Bad task/object-space parameters.
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),

    /// Binary dataset/checkpoint format violations, with byte offset.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Dataset content does not match the experiment's task spec.
    #[error("dataset mismatch: {0}")]
    DatasetMismatch(String),

    /// Experiment configuration problems.
    #[error("config error: {0}")]
    Config(String),

    /// Metric preconditions (missing eval points, empty windows, ...).
    #[error("metric error: {0}")]
    Metric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CsrlError>;
