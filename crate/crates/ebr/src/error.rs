use std::path::PathBuf;

/// Failures of the file formats and drivers in this crate.
#[derive(Debug, thiserror::Error)]
pub enum EbrError {
    // the io error is part of the message, not a separate source, so
    // anyhow's chain does not print it twice
    #[error("{}: {cause}", path.display())]
    Io { path: PathBuf, cause: std::io::Error },
    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("{}: unsupported format version {found}", path.display())]
    UnsupportedVersion { path: PathBuf, found: String },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] ebr_core::Error),
}

impl EbrError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EbrError::Io { path: path.into(), cause: source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        EbrError::Format { path: path.into(), message: message.into() }
    }

    /// Bad input data as opposed to a failure while computing.
    pub fn is_data_error(&self) -> bool {
        match self {
            EbrError::Io { .. }
            | EbrError::Parse { .. }
            | EbrError::Format { .. }
            | EbrError::UnsupportedVersion { .. }
            | EbrError::Config(_) => true,
            EbrError::Core(e) => !matches!(e, ebr_core::Error::NonFinite(_) | ebr_core::Error::Contract(_)),
        }
    }
}

pub type Result<T, E = EbrError> = std::result::Result<T, E>;
