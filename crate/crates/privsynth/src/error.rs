use std::path::{Path, PathBuf};

use privsynth_core::backend::BackendError;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] privsynth_core::Error),

    #[error("backend: {0}")]
    Backend(#[from] BackendError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Json(String),

    #[error("image decode: {0}")]
    Image(String),

    /// A document that parsed but violates the schema; `field` is a path like `entries[2].segments[0].payload`.
    #[error("{field}: {message}")]
    Schema { field: String, message: String },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("payload too large: {0}")]
    TooLarge(String),

    #[error("config: {0}")]
    Config(String),

    #[error("http: {0}")]
    Http(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl AsRef<Path>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.as_ref().to_path_buf();
        move |source| Error::Io { path, source }
    }

    pub fn schema(field: impl Into<String>, message: impl std::fmt::Display) -> Self {
        Error::Schema {
            field: field.into(),
            message: message.to_string(),
        }
    }

    pub fn code(&self) -> &str {
        match self {
            Error::Core(e) => e.code(),
            Error::Backend(e) => &e.code,
            Error::Io { .. } => "io_error",
            Error::Json(_) => "parse_error",
            Error::Image(_) => "image_decode_error",
            Error::Schema { .. } => "schema_error",
            Error::NotFound(_) => "not_found",
            Error::Conflict(_) => "conflict",
            Error::TooLarge(_) => "payload_too_large",
            Error::Config(_) => "config_error",
            Error::Http(_) => "http_error",
        }
    }

    pub fn retryable(&self) -> bool {
        match self {
            Error::Backend(e) => e.retryable,
            Error::Core(privsynth_core::Error::BackendUnavailable(_)) | Error::Http(_) => true,
            _ => false,
        }
    }

    pub fn envelope(&self) -> ErrorEnvelope {
        ErrorEnvelope {
            code: self.code().to_string(),
            message: self.to_string(),
            retryable: self.retryable(),
            field: match self {
                Error::Schema { field, .. } => Some(field.clone()),
                _ => None,
            },
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e.to_string())
    }
}

/// The `{code, message, retryable}` body every endpoint and the CLI use for failures.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct ErrorEnvelope {
    pub code: String,
    pub message: String,
    pub retryable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}
