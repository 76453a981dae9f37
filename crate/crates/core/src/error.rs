use std::path::PathBuf;

/// Errors raised anywhere in the retrieval stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("degenerate conv1d output length: T={len}, k={kernel}, stride={stride}, pad={pad}")]
    DegenerateLength {
        len: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("zero-norm embedding in {0}")]
    ZeroNorm(&'static str),

    #[error("{path}: format error at byte {offset}: {message}")]
    Format {
        path: String,
        offset: u64,
        message: String,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("unknown video id `{0}`")]
    UnknownVideo(String),

    #[error("missing frame features for video(s): {0:?}")]
    MissingFeatures(Vec<String>),

    #[error("index is empty")]
    EmptyIndex,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("cannot split corpus: {0}")]
    Split(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl std::fmt::Display, offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_string(),
            offset,
            message: message.into(),
        }
    }
}
