use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of an operation (e.g. non-positive depth).
    #[error("domain error: {0}")]
    Domain(String),
    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// Inputs do not satisfy an operation's size/shape contract.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Malformed or missing data on disk.
    #[error("data error: {0}")]
    Data(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
