use std::path::PathBuf;

/// Crate-wide error type. Exit-code mapping lives in the CLI.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("schema error in {path}: missing or renamed column `{column}`")]
    Schema { path: PathBuf, column: String },

    #[error("referential integrity: item ids with undefined categories: {item_ids:?}")]
    DanglingCategory { item_ids: Vec<u32> },

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("empty partition: {0}")]
    EmptyPartition(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("stale cache: {0}")]
    StaleCache(String),

    #[error("missing predictions for test ids: {0:?}")]
    MissingPredictions(Vec<u64>),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv { path: path.into(), source }
    }
}
