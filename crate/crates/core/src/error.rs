use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("invalid quantization scheme: {0}")]
    InvalidScheme(String),

    #[error("value {value} at index {index} outside [{min}, {max}]")]
    OutOfRange {
        index: usize,
        value: i32,
        min: i32,
        max: i32,
    },

    #[error("bad magic {found:?}, expected \"OTF1\"")]
    BadMagic { found: [u8; 4] },

    #[error("truncated tensor file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),

    #[error("malformed quantized tensor: {0}")]
    Malformed(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("hessian is not positive definite after damping (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("verification failed: {0}")]
    Verification(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
