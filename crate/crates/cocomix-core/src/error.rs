use std::path::PathBuf;

/// Crate-wide error type. Every variant formats to a single line so callers
/// can surface it verbatim.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {kernel}: {detail}")]
    ShapeMismatch { kernel: &'static str, detail: String },

    #[error("non-finite input to {kernel}")]
    NonFinite { kernel: &'static str },

    #[error("numeric domain error in {kernel}: {detail}")]
    Numeric { kernel: &'static str, detail: String },

    #[error("index out of range in {context}: {index} >= {bound}")]
    IndexOutOfRange {
        context: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(PathBuf),

    #[error("bad file format in {path}: {detail}")]
    BadFormat { path: PathBuf, detail: String },

    #[error("content hash mismatch in {path}: expected {expected}, found {found}")]
    HashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config error, 3 missing prerequisite,
    /// 4 numerical divergence, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) => 2,
            Error::MissingPrerequisite(_) => 3,
            Error::Divergence { .. } => 4,
            _ => 1,
        }
    }

    /// Short machine-parsable class tag, printed ahead of the message.
    pub fn class(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape",
            Error::NonFinite { .. } => "non-finite",
            Error::Numeric { .. } => "numeric",
            Error::IndexOutOfRange { .. } => "index",
            Error::InvalidConfig(_) => "config",
            Error::MissingPrerequisite(_) => "missing-prerequisite",
            Error::BadFormat { .. } => "format",
            Error::HashMismatch { .. } => "hash-mismatch",
            Error::Divergence { .. } => "divergence",
            Error::Io { .. } => "io",
            Error::Other(_) => "error",
        }
    }
}
