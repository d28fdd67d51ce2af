use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Every failure the core can report.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("softmax row {row} has every entry masked")]
    InvalidMask { row: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{what} index {index} out of range (len {len})")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("gaussian kernel is degenerate: distance standard deviation is zero")]
    DegenerateKernel,

    #[error("z-score statistics are degenerate: training target is constant")]
    DegenerateStd,

    #[error("insufficient data: {split} split has {len} steps, needs at least {needed}")]
    InsufficientData {
        split: &'static str,
        len: usize,
        needed: usize,
    },

    #[error("finite-difference oracle invalid: objective is not deterministic ({first} vs {second})")]
    OracleInvalid { first: f64, second: f64 },

    #[error("training diverged: non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("sensor {sensor} has a zero-norm embedding")]
    DegenerateEmbedding { sensor: usize },

    #[error("MAPE is undefined: every target at horizon {horizon} is masked")]
    UndefinedMape { horizon: usize },

    #[error("{0} is empty")]
    Empty(&'static str),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
