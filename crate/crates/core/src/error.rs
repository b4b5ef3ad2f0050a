use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid layer {index} ({kind}): {reason}")]
    InvalidLayer {
        index: usize,
        kind: &'static str,
        reason: String,
    },

    #[error("rank-deficient weight matrix in layer {index}: smallest singular value {smallest:e} vs largest {largest:e}")]
    RankDeficient {
        index: usize,
        smallest: f64,
        largest: f64,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("significantly negative eigenvalue {value:e} (largest {lambda_max:e})")]
    NegativeEigenvalue { value: f64, lambda_max: f64 },

    #[error("metric vanishes at this point (largest eigenvalue is zero)")]
    DegenerateMetric,

    #[error("no null directions: the point is locally fully determined")]
    EmptyNullSpace,

    #[error("no non-null directions to explore")]
    EmptyRangeSpace,

    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("checksum mismatch for {path}: manifest says {expected}, file hashes to {actual}")]
    Checksum {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            what,
            reason: reason.into(),
        }
    }

    /// Short machine-readable tag, used in trajectory manifests and CLI error lines.
    pub fn tag(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidLayer { .. } => "invalid_layer",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NegativeEigenvalue { .. } => "negative_eigenvalue",
            Error::DegenerateMetric => "degenerate_metric",
            Error::EmptyNullSpace => "empty_null_space",
            Error::EmptyRangeSpace => "empty_range_space",
            Error::Diverged { .. } => "diverged",
            Error::Format { .. } => "format",
            Error::Checksum { .. } => "checksum",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
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

pub(crate) fn check_finite(context: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context))
    }
}
