use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("unknown label `{label}` (line {line})")]
    UnknownLabel { label: String, line: usize },
    #[error("not enough examples: {0}")]
    Capacity(String),
    #[error("invalid task: {0}")]
    Task(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("verbalizer error: {0}")]
    Verbalizer(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("degenerate vector: zero norm")]
    DegenerateVector,
    #[error("span error: {0}")]
    Span(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
