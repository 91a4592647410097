use std::path::PathBuf;

/// Errors produced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown backbone `{0}` (known: sd15, tiny-test)")]
    UnknownBackbone(String),

    #[error("failed to load weights from {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite values at step {step}: {what}")]
    Numeric { step: usize, what: String },

    #[error("no source attention map for site {site} at step {step}")]
    MissingSource { site: String, step: usize },

    #[error("head count mismatch at site {site}: stored map has {stored} heads, live map has {live}")]
    HeadMismatch {
        site: String,
        stored: usize,
        live: usize,
    },

    #[error("invalid argument: {0}")]
    Validation(String),

    #[error("prompt has {tokens} tokens but the text encoder window is {limit} tokens")]
    PromptTooLong { tokens: usize, limit: usize },

    #[error("missing assets under {}: {}", root.display(), files.join(", "))]
    MissingAssets { root: PathBuf, files: Vec<String> },

    #[error("tokenizer: {0}")]
    Tokenizer(String),

    #[error("tensor container: {0}")]
    Container(String),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
