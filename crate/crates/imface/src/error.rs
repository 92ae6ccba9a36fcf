//! Crate-wide error type with coarse categories that map onto CLI exit codes.

use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ImfaceError {
    #[error("io: {0}")]
    Io(String),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric: {0}")]
    Numeric(String),
}

impl ImfaceError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        ImfaceError::Io(format!("{}: {e}", path.display()))
    }

    /// Short category tag used in CLI diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            ImfaceError::Io(_) => "io",
            ImfaceError::Config(_) => "config",
            ImfaceError::Data(_) => "data",
            ImfaceError::Numeric(_) => "numeric",
        }
    }

    /// Process exit code for this error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            ImfaceError::Io(_) => 3,
            ImfaceError::Config(_) => 4,
            ImfaceError::Data(_) => 5,
            ImfaceError::Numeric(_) => 6,
        }
    }
}
