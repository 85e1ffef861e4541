use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("value outside its domain: {0}")]
    Domain(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("no interactions left after k-core filtering (min_user={min_user}, min_item={min_item})")]
    EmptyAfterFilter { min_user: usize, min_item: usize },

    #[error("cannot split user {user}: needs at least 2 interactions, has {count}")]
    Split { user: u32, count: usize },

    #[error("negative sampling failed: {0}")]
    Sampling(String),

    #[error("non-finite values: {0}")]
    Numerics(String),

    #[error("inconsistent state: {0}")]
    State(String),

    #[error("degenerate gradient: {0}")]
    DegenerateGradient(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("serialization error: {0}")]
    Serde(String),
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

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
