//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input values violate a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Two collections that must agree in size do not.
    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    /// The requested assignment problem has no solution.
    #[error("infeasible assignment: {0}")]
    Infeasible(String),

    /// A text format failed to parse; `line` is 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A structured file (model, observations, report) is malformed.
    #[error("bad file contents: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Read a file into a string, attaching the path to any error.
pub fn read_file(path: impl AsRef<std::path::Path>) -> Result<String> {
    let path = path.as_ref();
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Write a file atomically: write to a temporary sibling, then rename.
/// Readers never observe a half-written file.
pub fn write_atomic(path: impl AsRef<std::path::Path>, contents: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().unwrap_or_else(|| std::path::Path::new("."));
    let mut tmp = dir.to_path_buf();
    let base = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    tmp.push(format!(".{base}.tmp-{}", std::process::id()));
    std::fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
