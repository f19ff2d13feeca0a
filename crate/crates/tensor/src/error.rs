use thiserror::Error;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: every dimension must be at least 1")]
    ZeroDim { shape: Vec<usize> },

    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("{op}: {what} = {size} is not divisible by {by}")]
    NotDivisible {
        op: &'static str,
        what: &'static str,
        size: usize,
        by: usize,
    },

    #[error("resample: unsupported ratio {from} -> {to} (must be an integer factor or its reciprocal)")]
    UnsupportedRatio { from: usize, to: usize },

    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },

    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },
}

impl TensorError {
    pub fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Self::Contract {
            op,
            msg: msg.into(),
        }
    }
}
