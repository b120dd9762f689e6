use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid shape {0:?}: every dimension must be positive and rank at least 1")]
    InvalidShape(Vec<usize>),

    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },

    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("index {index} out of range for tensor of {len} elements")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("window {window} exceeds padded input extent {extent} in {op}")]
    WindowTooLarge {
        op: &'static str,
        window: usize,
        extent: usize,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("loss must be a single-element tensor, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this graph; reset gradients before calling it again")]
    BackwardTwice,

    #[error("variable does not belong to this graph")]
    UnknownVar,
}
