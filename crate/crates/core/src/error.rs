use std::path::PathBuf;

/// Errors raised anywhere in the detector pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("shape error in {stage}: {detail}")]
    Shape { stage: &'static str, detail: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("embedder mismatch: checkpoint uses `{expected}`, requested `{found}`")]
    EmbedderMismatch { expected: String, found: String },

    #[error("category `{category}` of dataset `{dataset}` was truncated out of the prompt")]
    TruncatedCategory { dataset: String, category: String },

    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn shape(stage: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            stage,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable code, used by the CLI error JSON.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Data(_) | Error::TruncatedCategory { .. } | Error::UnknownDataset(_) => "data",
            Error::Shape { .. } => "shape",
            Error::Numeric(_) => "numeric",
            Error::EmbedderMismatch { .. } => "embedder-mismatch",
            Error::Io { .. } => "io",
            Error::Tensor(_) => "tensor",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
