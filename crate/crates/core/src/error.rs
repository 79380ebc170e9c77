use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid shapes, out-of-range parameters, inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("weight format error: {0}")]
    WeightFormat(#[from] WeightFormatError),

    /// Input image does not parse or does not match the model resolution.
    #[error("image error: {0}")]
    Image(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A broken internal invariant, e.g. inconsistent pruning provenance.
    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures while reading or validating a `VITW` weight container.
#[derive(Debug, Error)]
pub enum WeightFormatError {
    #[error("bad magic {found:?}, expected \"VITW\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("malformed header: {0}")]
    BadHeader(String),

    #[error("tensor `{name}`: unsupported dtype `{dtype}`")]
    UnknownDtype { name: String, dtype: String },

    #[error("tensor `{name}`: blob truncated (needs {needed} bytes, {available} available)")]
    Truncated {
        name: String,
        needed: usize,
        available: usize,
    },

    #[error("tensor `{name}`: shape {found:?} does not match expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("tensor `{name}`: byte length {found} inconsistent with shape (expected {expected})")]
    LengthMismatch {
        name: String,
        expected: usize,
        found: usize,
    },

    #[error("tensor `{name}`: offset {offset} is not where the previous blob ends ({expected})")]
    BadOffset {
        name: String,
        expected: usize,
        offset: usize,
    },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("duplicate tensor `{0}`")]
    DuplicateTensor(String),

    #[error("unexpected tensor `{0}`")]
    UnexpectedTensor(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("{0} trailing bytes after checksum")]
    TrailingBytes(usize),
}
