use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = BatError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum BatError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index error: {0}")]
    Index(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error{}: {message}", .id.as_ref().map(|s| format!(" in sentence {s}")).unwrap_or_default())]
    Data { id: Option<String>, message: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: u32, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl BatError {
    pub fn usage(msg: impl Into<String>) -> Self {
        BatError::Usage(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        BatError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        BatError::Data {
            id: None,
            message: msg.into(),
        }
    }

    pub fn data_in(id: impl Into<String>, msg: impl Into<String>) -> Self {
        BatError::Data {
            id: Some(id.into()),
            message: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BatError::Io {
            path: path.into(),
            source,
        }
    }
}
