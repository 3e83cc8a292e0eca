use thiserror::Error;

pub type Result<T> = std::result::Result<T, ReidError>;

#[derive(Debug, Error)]
pub enum ReidError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("batch of {0} is too small for training-mode batch normalization")]
    BatchTooSmall(usize),

    #[error("unknown scene id {0}")]
    UnknownScene(usize),

    #[error("invalid label {label} for lookup table of {size} identities")]
    InvalidLabel { label: usize, size: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("protocol cannot be satisfied: {0}")]
    Protocol(String),

    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl ReidError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        ReidError::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for failures that the CLI reports with the numerical exit code.
    pub fn is_numerical(&self) -> bool {
        matches!(self, ReidError::Numerical(_))
    }
}
