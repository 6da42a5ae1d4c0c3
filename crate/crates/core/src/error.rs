use thiserror::Error;

/// Workbench-wide error type. The `category()` string is the stable,
/// machine-parsable prefix the CLI prints on failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    /// Invalid configuration value or violated config invariant.
    #[error("config: {0}")]
    Config(String),
    /// Malformed on-disk artifact (checkpoint, manifest, embedding file, image).
    #[error("format: {0}")]
    Format(String),
    /// Valid format but unusable contents (empty corpus, single-polarity labels, ...).
    #[error("data: {0}")]
    Data(String),
    /// Numerical contract violation (NaN/Inf, non-positive temperature, ...).
    #[error("numeric: {0}")]
    Numeric(String),
    /// Tensor shape or inventory mismatch.
    #[error("shape: {0}")]
    Shape(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(format!("json: {e}"))
    }
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io(_) => "io",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::Data(_) => "data",
            Error::Numeric(_) => "numeric",
            Error::Shape(_) => "shape",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
