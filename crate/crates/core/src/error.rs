use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(
        "non-finite loss at sample {sample_index} (cross-entropy {cross_entropy}, kl {kl_term})"
    )]
    NonFiniteLoss {
        sample_index: usize,
        cross_entropy: f64,
        kl_term: f64,
    },

    #[error("unknown class label {label} (surrogate covers {classes} classes)")]
    UnknownClass { label: usize, classes: usize },

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("output node is not scalar (length {0})")]
    NonScalarOutput(usize),

    #[error("unknown parameter slice `{0}`")]
    UnknownSlice(String),

    #[error("bad magic number in {path}: expected {expected:#010x}, found {found:#010x}")]
    IdxMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("truncated IDX payload in {path}: expected {expected} bytes, found {found}")]
    IdxTruncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("image/label count mismatch: {images} images, {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u64),

    #[error("checkpoint shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dims(context: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            got,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
