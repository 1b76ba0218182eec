use thiserror::Error;

/// Errors raised by the sampling pipeline and the experiment harness.
#[derive(Debug, Error)]
pub enum PfldError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("step {t} out of range 0..={max}")]
    StepOutOfRange { t: usize, max: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl PfldError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        PfldError::InvalidArgument(msg.into())
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        PfldError::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors that stem from floating-point breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, PfldError::NonFinite(_) | PfldError::Numerical(_))
    }
}

pub type Result<T> = std::result::Result<T, PfldError>;

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(PfldError::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}

pub(crate) fn check_finite(context: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(PfldError::NonFinite(context.to_string()))
    }
}
