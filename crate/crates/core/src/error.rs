use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Non-finite or otherwise out-of-domain numeric input.
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("pose has {got} joints, skeleton has {expected}")]
    JointCountMismatch { expected: usize, got: usize },
    #[error("index error: {0}")]
    Index(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("non-finite loss in parameter group `{group}`")]
    NonFinite { group: String },
    #[error("training error: {0}")]
    Training(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Process exit code for command-line front ends: 2 for bad input, 3 for
    /// numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } | Error::Domain(_) | Error::Training(_) => 3,
            _ => 2,
        }
    }
}
