use std::path::PathBuf;

/// Errors produced by the translation pipeline and its supporting modules.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    /// A division by alpha or sigma was requested at a time where it vanishes.
    #[error("degenerate diffusion time t={0}")]
    DegenerateTime(f64),

    #[error("schedule inconsistency: negative transition variance {0} between t={1} and t={2}")]
    ScheduleInconsistency(f64, f64, f64),

    #[error("numeric failure at step {step}: {what}")]
    NumericFailure { step: usize, what: String },

    #[error("training diverged at step {0}")]
    TrainingFailure(usize),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for failures caused by non-finite numbers rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NumericFailure { .. } | Error::TrainingFailure(_) | Error::ScheduleInconsistency(..)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
