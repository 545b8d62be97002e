use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed corpus file {path}: {len} bytes is not a multiple of the 3073-byte record size")]
    MalformedCorpus { path: PathBuf, len: u64 },

    #[error("corrupt record {index} in {path}: label byte {label} is not a CIFAR-10 class")]
    CorruptRecord { path: PathBuf, index: usize, label: u8 },

    #[error("no CIFAR-10 batch files for the {split} split under {dir}")]
    MissingCorpus { dir: PathBuf, split: &'static str },

    #[error("image of {width}x{height} is too small for {octaves} octaves")]
    InsufficientResolution { width: usize, height: usize, octaves: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("empty descriptor sample")]
    EmptySample,

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("trailing bytes: expected {expected} bytes, found {found}")]
    TrailingBytes { expected: u64, found: u64 },

    #[error("corrupt index: ids not strictly increasing at row {row}")]
    CorruptIndex { row: usize },

    #[error("registry error for stream {stream}: {reason}")]
    Registry { stream: String, reason: String },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("degenerate ensemble: no votes")]
    DegenerateEnsemble,

    #[error("incomplete input: no features for stream {stream}")]
    IncompleteInput { stream: String },

    #[error("length mismatch: {left} predictions vs {right} labels")]
    LengthMismatch { left: usize, right: usize },

    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Wraps an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }
}
