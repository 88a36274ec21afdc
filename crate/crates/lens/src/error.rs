use std::path::PathBuf;

use lens_core::LensError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad configuration, flags or overrides (exit status 2).
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Lens(#[from] LensError),
    #[error("{0}")]
    Runtime(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        Self::Format { path: path.into(), msg: msg.to_string() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Lens(LensError::Config(_)) => 2,
            _ => 1,
        }
    }
}
