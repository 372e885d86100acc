use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config file not found: {0}")]
    ConfigMissing(PathBuf),
    #[error("config parse error in {path}: {message}")]
    ConfigParse { path: String, message: String },
    #[error("config schema violation at `{key}`: {message}")]
    Schema { key: String, message: String },
    #[error("config merge conflict at `{key}`: {message}")]
    MergeConflict { key: String, message: String },
    #[error("class partition overflow: requested {requested} classes, {available} available")]
    PartitionOverflow { requested: usize, available: usize },
    #[error("invalid task composition: {0}")]
    Composition(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("buffer error: {0}")]
    Buffer(String),
    #[error("lifecycle contract violation: {0}")]
    Contract(String),
    #[error("method `{method}` is not available in this build: {reason}")]
    MethodUnavailable { method: String, reason: String },
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("budget error: {0}")]
    Budget(String),
    #[error("infeasible budget: {0}")]
    Infeasible(String),
    #[error("training failure: {0}")]
    Training(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            key: key.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by the experiment description rather than by training.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::ConfigMissing(_)
                | Error::ConfigParse { .. }
                | Error::Schema { .. }
                | Error::MergeConflict { .. }
                | Error::PartitionOverflow { .. }
                | Error::Composition(_)
                | Error::UnknownMethod(_)
                | Error::MethodUnavailable { .. }
        )
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
