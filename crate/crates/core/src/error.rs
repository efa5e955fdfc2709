use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("schema version mismatch: file has {found}, this build reads {expected}")]
    SchemaVersion { found: String, expected: String },

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("unmapped subdirectory `{0}` (add it to the class mapping or the ignore list)")]
    UnmappedDirectory(String),

    #[error("unknown class label `{0}`")]
    UnknownClass(String),

    #[error("not enough records for {label}: requested {requested}, available {available} (short by {})", requested - available)]
    Shortfall {
        label: String,
        requested: usize,
        available: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("non-finite {component} loss at iteration {iteration}")]
    NonFinite { component: String, iteration: usize },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("weight schema mismatch: missing [{}], unexpected [{}]", missing.join(", "), extra.join(", "))]
    WeightSchema {
        missing: Vec<String>,
        extra: Vec<String>,
    },

    #[error("unknown attention site `{0}`")]
    UnknownSite(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}
