use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("buffer of length {len} does not fill shape {shape:?}")]
    BadBuffer { shape: Vec<usize>, len: usize },

    #[error("shape {0:?} has a zero extent")]
    ZeroExtent(Vec<usize>),

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis { op: &'static str, axis: usize, rank: usize },

    #[error("{op}: invalid permutation {perm:?} for rank {rank}")]
    InvalidPermutation {
        op: &'static str,
        perm: Vec<usize>,
        rank: usize,
    },

    #[error("{op}: non-finite input")]
    NonFiniteInput { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("parameter `{0}` is not registered")]
    UnknownParam(String),

    #[error("invalid parameter name `{0}`")]
    BadParamName(String),
}

pub type Result<T> = std::result::Result<T, DiffError>;
