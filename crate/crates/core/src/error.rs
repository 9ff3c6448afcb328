use std::path::PathBuf;

/// Errors produced anywhere in the reconstruction library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes in array container")]
    BadMagic,
    #[error("unsupported container version {0}")]
    VersionMismatch(u8),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("payload has {found} bytes, expected {expected}")]
    TrailingBytes { expected: usize, found: usize },
    #[error("truncated header")]
    TruncatedHeader,
    #[error("array contains non-finite values")]
    NonFinite,
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
