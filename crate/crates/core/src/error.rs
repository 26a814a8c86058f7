use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("header of {path} is missing column `{column}`")]
    HeaderMismatch { path: PathBuf, column: String },

    #[error("line {line}: expected {expected} fields, found {found}")]
    RowArity {
        line: u64,
        expected: usize,
        found: usize,
    },

    #[error("line {line}, column `{column}`: {message}")]
    BadCell {
        line: u64,
        column: String,
        message: String,
    },

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("labels contain a single class")]
    SingleClass,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("leaf id {leaf} out of range for tree {tree} with {count} leaves")]
    LeafOutOfRange {
        tree: usize,
        leaf: usize,
        count: usize,
    },

    #[error("task index {index} out of range for {tasks} tasks")]
    TaskIndex { index: usize, tasks: usize },

    #[error("non-finite loss at epoch {epoch}")]
    NonFinite { epoch: usize },

    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
