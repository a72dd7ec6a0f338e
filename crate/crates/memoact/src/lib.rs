//! File formats, experiment orchestration and the command-line front end
//! for `memoact-core`.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod experiment;
pub mod metrics;
pub mod verify;

pub use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: &'static str, found: [u8; 4] },
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("invalid file: {0}")]
    Invalid(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] memoact_core::Error),
}
