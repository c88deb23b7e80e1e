use thiserror::Error;

use crate::data::Role;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("matrix is not positive definite (pivot {index} = {pivot:e})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("missing column for role `{0}`")]
    MissingColumn(Role),

    #[error("training diverged: non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("role mismatch: expected {expected}, got {got}")]
    RoleMismatch { expected: String, got: String },

    #[error("missing regressor for {0}")]
    MissingRegressor(&'static str),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("csv error at row {row}, column `{column}`: {message}")]
    Csv {
        row: usize,
        column: String,
        message: String,
    },

    #[error("model format error: {0}")]
    Format(String),

    #[error("replication {replication}: {source}")]
    Replication {
        replication: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-parsable code, printed by the CLI on failure.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NotPositiveDefinite { .. } => "not_positive_definite",
            Error::NonFinite(_) => "non_finite",
            Error::EmptyBatch => "empty_batch",
            Error::EmptyInput(_) => "empty_input",
            Error::MissingColumn(_) => "missing_column",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::RoleMismatch { .. } => "role_mismatch",
            Error::MissingRegressor(_) => "missing_regressor",
            Error::InvalidDistribution(_) => "invalid_distribution",
            Error::Config(_) => "config",
            Error::Csv { .. } => "csv",
            Error::Format(_) => "model_format",
            Error::Replication { source, .. } => source.code(),
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        })
    }
}
