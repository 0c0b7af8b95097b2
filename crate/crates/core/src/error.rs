use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or hyper-parameters that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// Inputs that violate an operation's preconditions.
    #[error("validation error: {0}")]
    Validation(String),

    /// On-disk or wire data that does not match its declared layout.
    #[error("format error in `{field}`: {message}")]
    Format { field: String, message: String },

    /// The requested class has no pixels in the slice.
    #[error("class {class_id} is absent from the slice")]
    EmptyClass { class_id: u8 },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("training error: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable tag, used by the CLI and HTTP layers.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Validation(_) => "validation",
            Error::Format { .. } => "format",
            Error::EmptyClass { .. } => "empty_class",
            Error::NotFound(_) => "not_found",
            Error::Training(_) => "training",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Tensor(_) => "tensor",
        }
    }
}
