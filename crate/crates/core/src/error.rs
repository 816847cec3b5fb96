use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("format error in {field}: {message}")]
    Format { field: String, message: String },
    #[error("version error: {0}")]
    Version(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("empty surface: {0}")]
    EmptySurface(String),
    #[error("training diverged at step {step}: {what} is not finite")]
    Diverged { step: usize, what: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Nn(#[from] shapediff_nn::NnError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

pub(crate) fn format_err(field: &str, message: impl Into<String>) -> Error {
    Error::Format {
        field: field.to_string(),
        message: message.into(),
    }
}

pub(crate) fn io_err(path: &std::path::Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}
