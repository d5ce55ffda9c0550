use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("label {label} out of range for {num_classes} classes")]
    Label { label: usize, num_classes: usize },

    #[error("non-finite value in {0}")]
    Numeric(&'static str),

    #[error("invalid config `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("empty sample")]
    EmptySample,

    #[error("class {0} is absent from the batch")]
    ClassAbsent(usize),

    #[error("group error: {0}")]
    Group(String),

    #[error("parse error at row {row}, column \"{column}\": {reason}")]
    Parse {
        row: usize,
        column: String,
        reason: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("calibration set is empty")]
    EmptyCalibration,

    #[error("metric error: {0}")]
    Metric(String),

    #[error("degenerate sample: {0}")]
    Degenerate(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
