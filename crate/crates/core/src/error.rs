use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the tensor algebra layer.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("tensor must have at least one mode")]
    NoModes,
    #[error("dimension {mode} is zero; every mode size must be >= 1")]
    ZeroDimension { mode: usize },
    #[error("data length {got} does not match product of dims {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("mode {mode} out of range for order-{order} tensor")]
    ModeOutOfRange { mode: usize, order: usize },
    #[error("empty vector in product")]
    EmptyInput,
    #[error("column count mismatch: {left} vs {right}")]
    ColumnMismatch { left: usize, right: usize },
    #[error("factor {mode} has norm {norm}, expected unit norm")]
    NotUnitNorm { mode: usize, norm: f64 },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
}

/// Errors from the closed-form thresholding operators.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ThresholdError {
    #[error("degenerate Kronecker vector (zero norm)")]
    ZeroKronecker,
    #[error("length mismatch: row has {row}, Kronecker vector has {k}")]
    LengthMismatch { row: usize, k: usize },
    #[error("cubic constant {0} outside [0, 4/27]")]
    CubicOutOfRange(f64),
    #[error("unsupported norm order {0}; expected 0, 0.5 or 1")]
    UnsupportedOrder(f64),
    #[error("lambda {0} outside [0, 1]")]
    LambdaOutOfRange(f64),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParafacError {
    #[error("cannot decompose a zero tensor")]
    ZeroTensor,
    #[error("rank must be >= 1")]
    ZeroRank,
    #[error("invalid ALS configuration: {0}")]
    InvalidConfig(String),
    #[error("{0} penalty entries given for an order-{1} tensor")]
    PenaltyArity(usize, usize),
    #[error("protection set covers {0} modes, tensor has {1}")]
    ProtectionArity(usize, usize),
    #[error("previous factors do not match the tensor shape")]
    InitShape,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Threshold(#[from] ThresholdError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlsError {
    #[error("forgetting factor {0} outside [0, 1]")]
    InvalidForgetting(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch has {x} inputs but {y} outputs")]
    BatchLength { x: usize, y: usize },
    #[error("input dims {got:?} do not match model dims {expected:?}")]
    InputDims { expected: Vec<usize>, got: Vec<usize> },
    #[error("output length {got} does not match {expected}")]
    OutputDims { expected: usize, got: usize },
    #[error("no data seen yet (weight sum is zero)")]
    NoData,
    #[error("f_max must be >= 1")]
    ZeroComponents,
    #[error("latent dimension {f} out of range 1..={max}")]
    LatentOutOfRange { f: usize, max: usize },
    #[error("mode {0} is not an input mode")]
    ModeOutOfRange(usize),
    #[error("non-finite value in batch")]
    NonFinite,
    #[error(transparent)]
    Parafac(#[from] ParafacError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unexpected end of data while reading {0}")]
    Truncated(&'static str),
    #[error("invalid header: {0}")]
    Header(String),
    #[error("CSV: {0}")]
    Csv(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {inner}")]
    InFile {
        path: PathBuf,
        inner: Box<FormatError>,
    },
}

impl FormatError {
    pub fn in_file(self, path: impl Into<PathBuf>) -> Self {
        match self {
            e @ FormatError::Io { .. } | e @ FormatError::InFile { .. } => e,
            other => FormatError::InFile {
                path: path.into(),
                inner: Box::new(other),
            },
        }
    }
}

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("invalid generator config: {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("train prefix {prefix} exceeds {total} batches")]
    PrefixTooLong { prefix: usize, total: usize },
    #[error("inconsistent stream: {0}")]
    Inconsistent(String),
    #[error("metric undefined: every sample has a zero-norm target or prediction")]
    MetricUndefined,
    #[error("target and prediction counts differ ({0} vs {1})")]
    MetricLength(usize, usize),
    #[error("grid point (p={p}, lambda={lambda}): {source}")]
    GridPoint {
        p: f64,
        lambda: f64,
        #[source]
        source: PlsError,
    },
    #[error(transparent)]
    Pls(#[from] PlsError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Threshold(#[from] ThresholdError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
