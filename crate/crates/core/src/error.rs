use thiserror::Error;

pub type Result<T> = std::result::Result<T, ReefError>;

#[derive(Debug, Error)]
pub enum ReefError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("training diverged: {0}")]
    Training(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ReefError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        ReefError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ReefError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
