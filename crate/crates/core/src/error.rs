use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unknown node id {id:?} ({context})")]
    Referential { id: String, context: String },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("unbound leaf {0:?}")]
    UnboundLeaf(String),

    #[error("non-finite value produced by {op}")]
    Numeric { op: &'static str },

    #[error("gradient root must be 1x1, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },

    #[error("instance centered at {0:?} has no label")]
    MissingLabel(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Training { epoch: usize, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0} is undefined for these inputs")]
    Undefined(&'static str),

    #[error("explainer parameters have not been trained")]
    Untrained,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Coarse classification used by the command line front-end to pick an
    /// exit status.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Untrained => ErrorKind::Config,
            Error::Numeric { .. } | Error::Training { .. } | Error::Undefined(_) => {
                ErrorKind::Numeric
            }
            Error::Shape { .. } | Error::UnboundLeaf(_) | Error::NonScalarRoot { .. } => {
                ErrorKind::Numeric
            }
            Error::Parse { .. }
            | Error::Referential { .. }
            | Error::Dimension(_)
            | Error::MissingLabel(_)
            | Error::Io { .. }
            | Error::Json { .. } => ErrorKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}
