use thiserror::Error;

/// Failure categories shared by every module.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("outside the support: {0}")]
    Domain(String),
    #[error("unsupported for this problem: {0}")]
    Capability(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short category label, used for CLI exit codes and failure markers.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Contract(_) => "contract",
            Error::Domain(_) => "domain",
            Error::Capability(_) => "capability",
            Error::NonFinite(_) => "non-finite",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) | Error::Csv(_) => "format",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
