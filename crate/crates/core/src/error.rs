use thiserror::Error;

/// Errors raised by the localization toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside the domain of the operation (index range,
    /// direction cosine magnitude, coincident points).
    #[error("domain error: {0}")]
    Domain(String),

    /// Inconsistent geometry, partition or experiment configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A numerical routine produced a non-finite value or failed to converge.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
