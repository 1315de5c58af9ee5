use thiserror::Error;

#[derive(Debug, Error)]
pub enum TecoError {
    #[error("shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("matmul dimension mismatch: {lhs:?} x {rhs:?}")]
    DimMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("invalid axis {axis} for rank-{rank} tensor")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("expected rank {expected}, got shape {shape:?}")]
    RankMismatch { expected: usize, shape: Vec<usize> },
    #[error("kernel {kernel:?} larger than padded input {input:?}")]
    KernelTooLarge { kernel: Vec<usize>, input: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward already ran on this graph")]
    StaleGraph,
    #[error("non-finite input to {op}")]
    NonFinite { op: &'static str },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("{what} must be in {range}, got {value}")]
    OutOfRange {
        what: &'static str,
        range: &'static str,
        value: f64,
    },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("batch too small for test statistics: {count} element(s) per channel")]
    BatchTooSmall { count: usize },
    #[error("time dimension {t} too short (need at least {min})")]
    TimeTooShort { t: usize, min: usize },
    #[error("sample request K={k}, stride={stride} exceeds clip length {t}")]
    SampleTooLong { k: usize, stride: usize, t: usize },
    #[error("split index {index} out of range (0..={max})")]
    SplitOutOfRange { index: usize, max: usize },
    #[error("time gap {gap} not in 1..{t}")]
    BadTimeGap { gap: usize, t: usize },
    #[error("unknown corruption kind: {0}")]
    UnknownCorruption(String),
    #[error("severity {0} not in 0..=5")]
    BadSeverity(u32),
    #[error("missing gradient on updatable parameter {0}")]
    MissingGrad(String),
    #[error("bad magic: expected {expected:?}, got {got:?}")]
    BadMagic { expected: [u8; 4], got: [u8; 4] },
    #[error("version mismatch: expected {expected}, got {got}")]
    VersionMismatch { expected: u32, got: u32 },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TecoError>;
