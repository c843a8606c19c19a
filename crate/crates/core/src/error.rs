use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid range: {0}")]
    Range(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("numeric error at {site}: {detail}")]
    Numeric { site: String, detail: String },

    #[error("training error in block {block}: {detail}")]
    Training { block: usize, detail: String },

    #[error("format error in field `{field}`: {detail}")]
    Format { field: String, detail: String },

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code for the command-line surface.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Calibration(_) | Error::Range(_) | Error::Dimension { .. } => 2,
            Error::Numeric { .. } | Error::Training { .. } => 3,
            Error::Format { .. }
            | Error::Ingestion(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
