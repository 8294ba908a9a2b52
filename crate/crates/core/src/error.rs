use std::path::PathBuf;

use bhreg_autograd::AutogradError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("empty cloud")]
    EmptyCloud,
    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),
    #[error("binary scan size {0} is not a multiple of 16 bytes")]
    ScanSize(u64),
    #[error("degenerate bounding box: all points coincide")]
    DegenerateBox,
    #[error("invalid perturbation level {level} for {kind}")]
    InvalidLevel { kind: &'static str, level: f64 },
    #[error("point {index} lies outside [-1, 1]^3")]
    OutOfBounds { index: usize },
    #[error("tree depth {0} outside 1..=10")]
    InvalidDepth(usize),
    #[error("depth {depth} not populated (tree depth {max_depth})")]
    DepthUnpopulated { depth: usize, max_depth: usize },
    #[error("no node with label {label} at depth {depth}")]
    EmptyNode { depth: usize, label: u64 },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 3 pairs with positive weight, got {0}")]
    TooFewPairs(usize),
    #[error("invalid weight {0}")]
    InvalidWeight(f64),
    #[error("rank-deficient covariance (singular values {0:?})")]
    RankDeficient([f64; 3]),
    #[error("trees have different depths ({0} vs {1})")]
    DepthMismatch(usize, usize),
    #[error("{0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("loss became non-finite at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("empty input to {0}")]
    EmptyInput(&'static str),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }
}
