use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("csv error at row {row}, column `{column}`: {message}")]
    CsvCell {
        row: usize,
        column: String,
        message: String,
    },

    #[error("csv error in {path}: {message}")]
    CsvFile { path: PathBuf, message: String },

    #[error("train split is empty")]
    EmptyTrainSplit,

    #[error("group {0} has no training samples")]
    EmptyGroup(usize),

    #[error("silhouette undefined: fewer than two clusters after removing outliers")]
    SilhouetteUndefined,

    #[error("config error: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
