use thiserror::Error;

/// Every failure the workbench can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in `{op}`: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("format version mismatch: file has {found}, reader supports {expected}")]
    Format { found: u32, expected: u32 },

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("migration error: mixed format versions in {0:?}")]
    Migration(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    /// Short machine-readable tag used in CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Numeric(_) => "numeric",
            Error::Contract(_) => "contract",
            Error::Range(_) => "range",
            Error::Format { .. } => "format",
            Error::Integrity(_) => "integrity",
            Error::Parse { .. } => "parse",
            Error::Schema(_) => "schema",
            Error::Capacity(_) => "capacity",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::Migration(_) => "migration",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
