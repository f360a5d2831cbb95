use std::path::PathBuf;

/// Failures of the file formats and drivers.
#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("corrupt-trace: {0}")]
    CorruptTrace(String),
    #[error("corrupt-file: {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("version-mismatch: {what} has version {found}, expected {expected}")]
    VersionMismatch {
        what: &'static str,
        expected: u32,
        found: u32,
    },
    #[error("missing-artifact: {0}")]
    MissingArtifact(PathBuf),
    #[error(transparent)]
    Core(#[from] fluxattn_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type IoResult<T> = std::result::Result<T, IoError>;
