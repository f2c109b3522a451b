use thiserror::Error;

#[derive(Debug, Error)]
pub enum VbError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("undefined result: {0}")]
    Undefined(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl VbError {
    pub fn is_numerical(&self) -> bool {
        matches!(self, VbError::Numerical(_))
    }
}

pub type Result<T> = std::result::Result<T, VbError>;
