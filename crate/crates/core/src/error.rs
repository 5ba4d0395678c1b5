use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("i/o error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported bit depth: {0}")]
    UnsupportedBitDepth(String),

    #[error("unsupported channel layout: {0}")]
    UnsupportedChannels(String),

    #[error("corrupt header: {0}")]
    CorruptHeader(String),

    #[error("non-finite sample at index {index}")]
    NonFiniteSample { index: usize },

    #[error("sample out of range at index {index}: {value}")]
    SampleOutOfRange { index: usize, value: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("image too small: {width}x{height}, need at least {min}x{min}")]
    ImageTooSmall { width: usize, height: usize, min: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid network config: {0}")]
    InvalidConfig(String),

    #[error("invalid fusion job: {0}")]
    InvalidJob(String),

    #[error("malformed sidecar {}: {message}", .path.display())]
    Sidecar { path: PathBuf, message: String },

    #[error("loss became non-finite at step {step}")]
    Diverged { step: usize },
}

impl Error {
    /// Stable machine-readable code, one per variant.
    pub fn code(&self) -> &'static str {
        match self {
            Error::MissingFile(_) => "missing_file",
            Error::Io { .. } => "io",
            Error::UnsupportedBitDepth(_) => "unsupported_bit_depth",
            Error::UnsupportedChannels(_) => "unsupported_channels",
            Error::CorruptHeader(_) => "corrupt_header",
            Error::NonFiniteSample { .. } => "non_finite_sample",
            Error::SampleOutOfRange { .. } => "sample_out_of_range",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::ImageTooSmall { .. } => "image_too_small",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::InvalidConfig(_) => "invalid_config",
            Error::InvalidJob(_) => "invalid_job",
            Error::Sidecar { .. } => "sidecar",
            Error::Diverged { .. } => "diverged",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn dims(expected: impl ToString, actual: impl ToString) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
