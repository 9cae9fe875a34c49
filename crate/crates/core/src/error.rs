use std::path::PathBuf;

/// Errors produced anywhere in the pre-training pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed {what} at byte offset {offset}: {detail}")]
    Format {
        what: &'static str,
        offset: u64,
        detail: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}, sample {sample}: {detail}")]
    Diverged {
        step: u64,
        sample: usize,
        detail: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(detail: impl Into<String>) -> Self {
        Error::InvalidArgument(detail.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by input data or numerics rather than usage.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Config(_) | Error::InvalidArgument(_))
    }
}
