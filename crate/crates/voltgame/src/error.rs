use std::path::{Path, PathBuf};

use thiserror::Error;

/// A configuration value that parsed but breaks an invariant.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid `{field}`: {message}")]
pub struct ValidationError {
    pub field: String,
    pub message: String,
}

impl ValidationError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { field: field.into(), message: message.into() }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}:{line}:{column}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, column: usize, message: String },
    #[error(transparent)]
    Validation(#[from] ValidationError),
}

impl ScenarioError {
    pub(crate) fn parse(path: &Path, text: &str, err: &toml::de::Error) -> Self {
        let (line, column) = match err.span() {
            Some(span) => {
                let before = &text[..span.start.min(text.len())];
                let line = before.matches('\n').count() + 1;
                let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
                (line, column)
            }
            None => (0, 0),
        };
        ScenarioError::Parse { path: path.to_path_buf(), line, column, message: err.message().to_string() }
    }
}

/// Failure while writing trace files.
#[derive(Debug, Error)]
pub enum TraceError {
    #[error("cannot write {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot write {}: {source}", path.display())]
    Csv { path: PathBuf, source: csv::Error },
    #[error("cannot encode summary {}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("malformed trace table {}: {message}", path.display())]
    Malformed { path: PathBuf, message: String },
}
