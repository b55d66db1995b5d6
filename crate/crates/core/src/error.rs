use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("empty dataset passed to {0}")]
    EmptyDataset(&'static str),

    #[error("invalid value for `{field}`: {constraint}")]
    InvalidConfig { field: String, constraint: String },

    #[error("client weights are not on the probability simplex: {0}")]
    OffSimplex(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("sign logging was disabled for this run; set `log_signs = true` (or pass --log-signs) and rerun")]
    SignLoggingDisabled,

    #[error("malformed {what}: {detail}")]
    Parse { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, constraint: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            constraint: constraint.into(),
        }
    }

    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::InvalidConfig { .. } => "invalid_config",
            Error::OffSimplex(_) => "off_simplex",
            Error::NonFinite(_) => "non_finite",
            Error::SignLoggingDisabled => "sign_logging_disabled",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
