use crate::tensor::Shape4;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs} and {rhs}")]
    ShapeMismatch { op: &'static str, lhs: Shape4, rhs: Shape4 },

    #[error("{op}: expected {expected} channels, input has {got}")]
    ChannelMismatch { op: &'static str, expected: usize, got: usize },

    #[error("{op}: kernel {kernel:?} with stride {stride:?} and padding {padding:?} produces an empty output for input {input}")]
    EmptyConvOutput {
        op: &'static str,
        input: Shape4,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    },

    #[error("avg_pool: window {window:?} larger than input {input}")]
    WindowTooLarge { input: Shape4, window: (usize, usize) },

    #[error("backward: loss must be a scalar, got shape {shape}")]
    NonScalarLoss { shape: Shape4 },

    #[error("{op}: non-finite value at element {index}")]
    NonFinite { op: String, index: usize },

    #[error("cross_entropy: one-hot row {row} sums to {sum}, expected 1")]
    BadOneHot { row: usize, sum: f64 },

    #[error("init_dwck: jitter {jitter} outside [0, 0.5)")]
    JitterOutOfRange { jitter: f64 },

    #[error("dwck: input spatial dims ({h}, {w}) exceed plan pad_to ({pad_h}, {pad_w}); rebuild the plan")]
    InputExceedsPlan { h: usize, w: usize, pad_h: usize, pad_w: usize },

    #[error("build_allcnn: input spatial dims ({h}, {w}) too small, need at least 8x8")]
    InputTooSmall { h: usize, w: usize },

    #[error("parameters must be registered while the store is not borrowed by a live tape binding")]
    ParamRegistration,

    #[error("{file}: {problem}")]
    DataFormat { file: String, problem: String },

    #[error("subset: cannot stratify {n} items over 10 classes (need n >= 10)")]
    SubsetTooSmall { n: usize },

    #[error("subset: requested {n} items but dataset has {available}")]
    SubsetTooLarge { n: usize, available: usize },

    #[error("non-finite gradient in parameter '{name}'")]
    NonFiniteGradient { name: String },

    #[error("checkpoint {path}: {problem}")]
    Checkpoint { path: String, problem: String },

    #[error("importance sampling: proposal density is zero at drawn sample x = {x}")]
    ZeroProposalDensity { x: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
