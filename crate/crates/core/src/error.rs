use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("invalid axis {axis} for tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("class index {index} out of range (n_classes = {n_classes})")]
    InvalidClass { index: usize, n_classes: usize },

    #[error("degenerate importance weights (class {class:?}): squared norm {norm_sq:e}")]
    DegenerateAlpha { class: Option<usize>, norm_sq: f64 },

    #[error("invalid distraction config: {0}")]
    InvalidDistraction(String),

    #[error("need at least 2 distances, got {0}")]
    TooFewDistances(usize),

    #[error("insufficient candidates: {eligible} eligible, need at least 2")]
    InsufficientCandidates { eligible: usize },

    #[error("empty candidate set")]
    EmptyCandidates,

    #[error("invalid privacy parameter: {0}")]
    InvalidPrivacy(String),

    #[error("invalid landmark set: {0}")]
    InvalidLandmarks(String),

    #[error("degenerate point set: all source points coincide")]
    DegenerateAlignment,

    #[error("gallery item {id} has no landmarks")]
    MissingLandmarks { id: String },

    #[error("zero vector in cosine similarity")]
    ZeroVector,

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("invalid evaluation input: {0}")]
    InvalidEval(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("bad tensor file {path}: {reason}")]
    BadTensorFile { path: PathBuf, reason: String },

    #[error("line {line}: {source}")]
    JsonLine {
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
