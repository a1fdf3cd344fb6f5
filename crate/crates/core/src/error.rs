use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, SimError>;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown aggregate kernel '{name}' (registered: {known})")]
    UnknownKernel { name: String, known: String },

    #[error(
        "simulator output diverges from functional reference at vertex {vertex}, element {element} \
         (layer {layer}): got {got}, expected {expected}"
    )]
    OracleMismatch {
        layer: usize,
        vertex: usize,
        element: usize,
        got: i32,
        expected: i32,
    },

    #[error("buffer capacity violated: {0}")]
    Capacity(String),
}

impl SimError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SimError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        SimError::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
