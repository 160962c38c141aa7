use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape {shape:?} does not hold {len} values (extents must be positive)")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("axis {axis} out of range for a {ndim}-d tensor")]
    InvalidAxis { axis: usize, ndim: usize },

    #[error("log of non-positive value {value}")]
    NonPositiveLog { value: f64 },

    #[error("{op}: kernel {kernel}x{kernel} does not fit a {height}x{width} input")]
    KernelTooLarge {
        op: &'static str,
        kernel: usize,
        height: usize,
        width: usize,
    },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("backward already ran on this tape; call reset_grads first")]
    BackwardTwice,

    #[error("{0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
