use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numerical error in {context}: {detail}")]
    Numerical { context: String, detail: String },

    #[error("rank error: {0}")]
    Rank(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("training diverged at epoch {epoch} (layer {layer:?}): {detail}")]
    Training {
        layer: Option<usize>,
        epoch: usize,
        detail: String,
    },

    #[error("assembly error: {0}")]
    Assembly(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("I/O error on {path:?}: {source}")]
    Io {
        path: Option<PathBuf>,
        #[source]
        source: std::io::Error,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn numerical(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Short machine-readable category, used by the CLI for exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Numerical { .. } => "numerical",
            Error::Rank(_) => "rank",
            Error::Plan(_) => "plan",
            Error::Input(_) => "input",
            Error::Training { .. } => "training",
            Error::Assembly(_) => "assembly",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
            Error::Stage { source, .. } => source.category(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(source: std::io::Error) -> Self {
        Error::Io { path: None, source }
    }
}

/// Structural problems found while decoding a container file.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("file truncated while reading {what}")]
    Truncated { what: String },

    #[error("length mismatch in {what}: declared {declared}, expected {expected}")]
    LengthMismatch {
        what: String,
        declared: u64,
        expected: u64,
    },

    #[error("unknown dtype tag {tag} for tensor `{tensor}`")]
    UnknownDtype { tensor: String, tag: u8 },

    #[error("invalid header: {0}")]
    Header(String),

    #[error("content hash mismatch: header says {expected}, payload hashes to {actual}")]
    HashMismatch { expected: String, actual: String },

    #[error("tensor `{0}` listed in header is missing")]
    MissingTensor(String),

    #[error("tensor `{0}` appears more than once")]
    DuplicateTensor(String),

    #[error("tensor `{0}` is not declared in the header")]
    UndeclaredTensor(String),

    #[error("tensor `{tensor}`: {detail}")]
    BadTensor { tensor: String, detail: String },

    #[error("trailing bytes after last tensor record")]
    TrailingBytes,
}
