use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the codec.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("window/hop pair violates the overlap-add condition: {0}")]
    OverlapAdd(String),

    #[error("signal of {len} samples is shorter than one {frame}-sample frame")]
    TooShort { len: usize, frame: usize },

    #[error("codebook is empty")]
    EmptyCodebook,

    #[error("index {index} out of range for codebook of size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("loss term `{0}` is not finite")]
    NonFiniteLoss(&'static str),

    #[error("diffusion time {t} outside [{lo}, {hi}]")]
    TimeOutOfRange { t: f64, lo: f64, hi: f64 },

    #[error("perturbation sigma is zero")]
    ZeroSigma,

    #[error("reference signal has zero energy")]
    ZeroReference,

    #[error("bitstream format error: {0}")]
    Format(String),

    #[error("unsupported bitstream version {found} (expected {expected})")]
    VersionMismatch { found: u8, expected: u8 },

    #[error("truncated stream: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("payload checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("index {index} does not fit in {bits} bits")]
    IndexOverflow { index: u32, bits: u8 },

    #[error("no readable audio in manifest")]
    NoUsableAudio,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(
        context: &'static str,
        expected: impl std::fmt::Debug,
        actual: impl std::fmt::Debug,
    ) -> Self {
        Error::ShapeMismatch {
            context,
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }
}
