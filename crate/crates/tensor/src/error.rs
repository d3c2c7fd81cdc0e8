use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    Shape { op: &'static str, detail: String },
    NonFinite { op: &'static str },
    NotScalar { shape: Vec<usize> },
    BatchTooSmall { op: &'static str, size: usize },
    KernelTooLarge { kernel: (usize, usize), padded_input: (usize, usize) },
    UnknownNode(usize),
    TapeConsumed,
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: String) -> Self {
        Self::Shape { op, detail }
    }
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Shape { op, detail } => write!(f, "{op}: shape mismatch ({detail})"),
            Self::NonFinite { op } => write!(f, "{op}: non-finite input"),
            Self::NotScalar { shape } => {
                write!(f, "expected a scalar, got tensor of shape {shape:?}")
            }
            Self::BatchTooSmall { op, size } => {
                write!(f, "{op}: batch of size {size} is too small in train mode")
            }
            Self::KernelTooLarge { kernel, padded_input } => write!(
                f,
                "conv2d: kernel {}x{} larger than padded input {}x{}",
                kernel.0, kernel.1, padded_input.0, padded_input.1
            ),
            Self::UnknownNode(id) => write!(f, "unknown node id {id}"),
            Self::TapeConsumed => write!(f, "tape already consumed by a previous backward pass"),
        }
    }
}

impl std::error::Error for TensorError {}
