use std::path::PathBuf;

/// Every failure the library can report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index {index} out of range 0..{bound} in {op}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("non-finite value produced by {op}")]
    Numeric { op: String },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("state error: {0}")]
    State(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("validation error in field `{field}`: {msg}")]
    Validation { field: String, msg: String },
    #[error("config error for `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("sizing error: {0}")]
    Sizing(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("checkpoint load error: {0}")]
    Load(String),
    #[error("missing files: {0:?}")]
    MissingFiles(Vec<PathBuf>),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }
}
