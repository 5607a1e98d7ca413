use thiserror::Error;

#[derive(Debug, Error)]
pub enum KgpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("conjugate gradient did not converge after {iterations} iterations (best relative residual {best_residual:.3e})")]
    CgNonConvergence { iterations: usize, best_residual: f64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl KgpError {
    /// Process exit code: 2 for validation-type failures, 3 for numerical ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            KgpError::Dimension(_) | KgpError::Validation(_) | KgpError::Io(_) | KgpError::Json(_) => 2,
            KgpError::Numerical(_) | KgpError::CgNonConvergence { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, KgpError>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(KgpError::Dimension(msg.into()))
}

pub(crate) fn val_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(KgpError::Validation(msg.into()))
}

pub(crate) fn num_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(KgpError::Numerical(msg.into()))
}
