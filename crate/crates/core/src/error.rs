//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid user-supplied configuration (specs, intervals, counts).
    #[error("configuration error: {0}")]
    Config(String),

    /// An argument outside its documented domain (e.g., arc length out of range).
    #[error("domain error: {0}")]
    Domain(String),

    /// A violated internal contract between modules.
    #[error("contract error: {0}")]
    Contract(String),

    /// Route/scenario generation failed for a particular trigger; callers retry.
    #[error("generation failure: {0}")]
    Generation(String),

    /// Diffusion sampling produced non-finite intermediates.
    #[error("sampling failure: {0}")]
    Sampling(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
