use std::path::PathBuf;

use seqrts_core::trial::ConfigError;

/// A row/column-located problem in an input file.
#[derive(Debug, thiserror::Error)]
#[error("{}{}{}: {message}", path.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "input".into()),
        row.map(|r| format!(" line {r}")).unwrap_or_default(),
        column.as_ref().map(|c| format!(" column {c}")).unwrap_or_default())]
pub struct DataError {
    pub path: Option<PathBuf>,
    pub row: Option<u64>,
    pub column: Option<String>,
    pub message: String,
}

impl DataError {
    pub fn new(message: impl Into<String>) -> Self {
        DataError { path: None, row: None, column: None, message: message.into() }
    }

    pub fn at(row: u64, column: &str, message: impl Into<String>) -> Self {
        DataError { path: None, row: Some(row), column: Some(column.into()), message: message.into() }
    }

    pub fn in_file(mut self, path: impl Into<PathBuf>) -> Self {
        self.path = Some(path.into());
        self
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => 2,
            AppError::Data(_) | AppError::Io { .. } => 3,
            AppError::Invariant(_) => 4,
        }
    }

    pub fn io(context: impl std::fmt::Display, source: std::io::Error) -> Self {
        AppError::Io { context: context.to_string(), source }
    }
}
