use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] decamp_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Malformed or schema-violating input; `field` is the JSON path of the offending value.
    #[error("{path}:{line}: field `{field}`: {detail}")]
    Schema { path: PathBuf, line: usize, field: String, detail: String },
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },
    #[error("{0}")]
    Usage(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short category used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Core(e) => match e {
                decamp_core::Error::Shape { .. } => "shape",
                decamp_core::Error::NonScalarLoss { .. } | decamp_core::Error::MissingGrad { .. } => "autodiff",
                decamp_core::Error::Config(_) => "config",
                decamp_core::Error::Scene(_) => "scene",
                decamp_core::Error::Mask(_) => "mask",
                decamp_core::Error::Loss(_) => "loss",
                decamp_core::Error::Diverged { .. } => "diverged",
            },
            Error::Io { .. } => "io",
            Error::Schema { .. } => "schema",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Usage(_) => "usage",
        }
    }
}
