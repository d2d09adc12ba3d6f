//! Runner errors and their exit codes: 2 for configuration problems, 3 for
//! numerical aborts, 4 for I/O and missing artifacts.

use std::fmt;

use ntk_lab_core::Error as CoreError;
use serde_json::json;

#[derive(Debug)]
pub enum CliError {
    Schema { path: String, message: String },
    Numerical(String),
    Io(String),
}

impl CliError {
    pub fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Schema {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        CliError::Io(message.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema { .. } => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub fn path(&self) -> Option<&str> {
        match self {
            CliError::Schema { path, .. } => Some(path),
            _ => None,
        }
    }

    /// Machine-readable form printed on stderr.
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            CliError::Schema { path, message } => json!({
                "error": "schema",
                "exit_code": 2,
                "path": path,
                "message": message,
            }),
            CliError::Numerical(m) => json!({ "error": "numerical", "exit_code": 3, "message": m }),
            CliError::Io(m) => json!({ "error": "io", "exit_code": 4, "message": m }),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Schema { path, message } if path.is_empty() => write!(f, "invalid config: {message}"),
            CliError::Schema { path, message } => write!(f, "invalid config at {path}: {message}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Io(e) => CliError::Io(e.to_string()),
            CoreError::Parse(m) => CliError::Io(m),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
