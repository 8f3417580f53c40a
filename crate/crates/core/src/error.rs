use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("ill-conditioned SH basis (order {order}, {points} points): condition number {condition:.3e} exceeds {threshold:.3e}")]
    IllConditioned {
        order: usize,
        points: usize,
        condition: f64,
        threshold: f64,
    },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("parse error in {path}, line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("unsupported {what} version {found} (expected {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("grid hash mismatch for {role} grid: checkpoint has {expected}, input has {found}")]
    GridMismatch {
        role: &'static str,
        expected: String,
        found: String,
    },

    #[error("invalid config: {field}: {message}")]
    Config { field: String, message: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable short name of the variant, used in structured error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::IllConditioned { .. } => "ill-conditioned",
            Error::InvalidGrid(_) => "invalid-grid",
            Error::NonFinite(_) => "non-finite",
            Error::Parse { .. } => "parse",
            Error::Version { .. } => "version",
            Error::GridMismatch { .. } => "grid-mismatch",
            Error::Config { .. } => "config",
            Error::Dataset(_) => "dataset",
            Error::Eval(_) => "eval",
            Error::Training(_) => "training",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn mismatch(
        context: &'static str,
        expected: impl ToString,
        got: impl ToString,
    ) -> Self {
        Error::DimensionMismatch {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
