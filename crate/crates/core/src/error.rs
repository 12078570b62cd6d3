use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed volume file {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cohort error: {0}")]
    Cohort(String),

    #[error("registration failed: {0}")]
    Registration(String),

    #[error("reference {id}: {source}")]
    Reference {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("subject {id}: {source}")]
    Subject {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn for_subject(self, id: &str) -> Self {
        Error::Subject {
            id: id.to_string(),
            source: Box::new(self),
        }
    }

    pub fn for_reference(self, id: &str) -> Self {
        Error::Reference {
            id: id.to_string(),
            source: Box::new(self),
        }
    }

    pub fn for_fold(self, fold: usize) -> Self {
        Error::Fold {
            fold,
            source: Box::new(self),
        }
    }

    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::GeometryMismatch(_) => "geometry_mismatch",
            Error::Degenerate(_) => "degenerate_input",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Cohort(_) => "cohort",
            Error::Registration(_) => "registration",
            Error::Reference { source, .. }
            | Error::Subject { source, .. }
            | Error::Fold { source, .. } => source.kind(),
        }
    }
}
