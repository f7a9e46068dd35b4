use std::path::PathBuf;

use crate::descriptor::ImageId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("zero-norm denominator: degenerate embedding")]
    ZeroNormDenominator,

    #[error("descriptor {id} has a zero-norm vector")]
    ZeroNormDescriptor { id: ImageId },

    #[error("descriptor {id}: component {index} is not finite")]
    NonFiniteComponent { id: ImageId, index: usize },

    #[error("bad magic at byte offset {offset}: expected {expected:?}, found {found:?}")]
    BadMagic {
        offset: u64,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("unsupported version {found} at byte offset {offset} (expected {expected})")]
    VersionMismatch { offset: u64, expected: u32, found: u32 },

    #[error("unknown flatten mode {found} at byte offset {offset}")]
    UnknownFlatten { offset: u64, found: u32 },

    #[error("dimension mismatch at byte offset {offset}: expected {expected}, found {found}")]
    DimensionMismatch { offset: u64, expected: usize, found: usize },

    #[error("truncated file: needed {needed} more bytes at byte offset {offset}")]
    TruncatedFile { offset: u64, needed: u64 },

    #[error("duplicate image id {0}")]
    DuplicateId(ImageId),

    #[error("duplicate prediction for pair ({query}, {reference})")]
    DuplicatePrediction { query: ImageId, reference: ImageId },

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("tape does not match parameters or gradient: {0}")]
    TapeMismatch(String),

    #[error("invalid crop scale {0}: must lie in [0.2, 1.0]")]
    InvalidScale(f64),

    #[error("invalid crop anchor ({0}, {1}) for the requested scale")]
    InvalidAnchor(f64, f64),

    #[error("invalid config: {field}: {reason}")]
    ConfigInvalid { field: String, reason: String },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    DivergenceDetected { epoch: usize },

    #[error("ground truth is empty: micro-AP is undefined")]
    EmptyGroundTruth,

    #[error("reports were computed against different ground truth: {0}")]
    GtMismatch(String),

    #[error("{path}: line {line}: {message}")]
    Parse { path: PathBuf, line: u64, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::ConfigInvalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
