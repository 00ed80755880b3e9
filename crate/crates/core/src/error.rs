use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("rate {rate} does not divide image size {height}x{width}")]
    IndivisibleRate {
        rate: usize,
        height: usize,
        width: usize,
    },

    #[error("zero-norm vector at index {index} of the {side} collection")]
    ZeroNorm { side: &'static str, index: usize },

    #[error("label `{0}` is not present in the gallery")]
    MissingLabel(String),

    #[error("loss became non-finite at step {step}")]
    Diverged { step: usize },

    #[error("{term} term: {source}")]
    Term {
        term: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("unsupported image {path}: {reason}")]
    UnsupportedImage { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Codec {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_term(self, term: &'static str) -> Self {
        Error::Term {
            term,
            source: Box::new(self),
        }
    }

    /// Short machine-readable category, used for single-line CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidArgument { .. } => "invalid-argument",
            Error::IndivisibleRate { .. } => "indivisible-rate",
            Error::ZeroNorm { .. } => "zero-norm",
            Error::MissingLabel(_) => "missing-label",
            Error::Diverged { .. } => "diverged",
            Error::Term { source, .. } => source.kind(),
            Error::UnsupportedImage { .. } => "unsupported-image",
            Error::Io { .. } => "io",
            Error::Codec { .. } => "codec",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
