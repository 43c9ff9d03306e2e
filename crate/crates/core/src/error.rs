use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the alignment pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("degenerate input: row {row} has norm below {eps:e}")]
    DegenerateRow { row: usize, eps: f64 },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("{path}:{line}: parse error: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("coverage error: no score for record `{0}`")]
    Coverage(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("non-deterministic loss: two evaluations at identical parameters differ ({first} vs {second})")]
    Determinism { first: f64, second: f64 },

    #[error("numeric failure at epoch {epoch}, batch {batch}: non-finite gradient for parameter `{param}`")]
    NonFiniteGradient {
        epoch: usize,
        batch: usize,
        param: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Schema,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Parse { .. }
            | Error::Schema(_)
            | Error::Coverage(_)
            | Error::Io { .. } => ErrorKind::Schema,
            Error::Shape { .. }
            | Error::DegenerateRow { .. }
            | Error::NonFinite { .. }
            | Error::DegenerateBatch(_)
            | Error::UndefinedMetric(_)
            | Error::Determinism { .. }
            | Error::NonFiniteGradient { .. } => ErrorKind::Numeric,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
