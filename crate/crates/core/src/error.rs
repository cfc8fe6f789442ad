use hcl_autodiff::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad argument or input data; the caller can fix it.
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("matrix is not positive semidefinite (smallest eigenvalue {min_eig:e}, trace {trace:e})")]
    NotPsd { min_eig: f64, trace: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("runtime failure: {0}")]
    Runtime(String),
}

impl Error {
    /// True when the failure stems from user input rather than the environment.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Invalid(_) | Error::Config { .. } | Error::Format(_) | Error::NotPsd { .. } => true,
            Error::Nn(NnError::Config(_) | NnError::Checkpoint(_) | NnError::BatchTooSmall(_)) => true,
            Error::Io(_) | Error::Nn(_) | Error::Runtime(_) => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}
