use std::io;
use std::path::{Path, PathBuf};

/// A malformed byte stream, located by byte offset.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("parse error at byte {offset}: {msg}")]
pub struct FormatError {
    pub offset: u64,
    pub msg: String,
}

impl FormatError {
    pub fn new(offset: u64, msg: impl Into<String>) -> Self {
        FormatError { offset, msg: msg.into() }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("{}: parse error at byte {offset}: {msg}", path.display())]
    Parse { path: PathBuf, offset: u64, msg: String },
    #[error("{}: {msg}", path.display())]
    Invalid { path: PathBuf, msg: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Core(#[from] axform_core::Error),
}

pub type AppResult<T> = Result<T, AppError>;

impl AppError {
    pub fn parse(path: &Path, e: FormatError) -> Self {
        AppError::Parse { path: path.to_path_buf(), offset: e.offset, msg: e.msg }
    }

    pub fn invalid(path: &Path, msg: impl Into<String>) -> Self {
        AppError::Invalid { path: path.to_path_buf(), msg: msg.into() }
    }

    pub fn io(path: &Path, source: io::Error) -> Self {
        AppError::Io { path: path.to_path_buf(), source }
    }

    /// Process exit code: 1 usage, 2 data, 3 numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) | AppError::Core(axform_core::Error::Config(_)) => 1,
            AppError::Core(axform_core::Error::NonFinite(_)) => 3,
            _ => 2,
        }
    }
}

pub(crate) fn read_file(path: &Path) -> AppResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| AppError::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> AppResult<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| AppError::io(path, e))
}
