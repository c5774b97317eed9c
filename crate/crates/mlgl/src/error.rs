use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] mlgl_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Malformed or unsupported audio.
    #[error("{path}: byte {offset}: {message}")]
    Decode {
        path: PathBuf,
        offset: u64,
        message: String,
    },
    /// Dataset files that cannot be ingested; one entry per offending row.
    #[error("{path}: {}", problems.join("; "))]
    Ingest { path: PathBuf, problems: Vec<String> },
    /// Malformed checkpoint.
    #[error("checkpoint {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Core(mlgl_core::Error::Diverged { .. }) => "diverged",
            Error::Core(_) => "model",
            Error::Io { .. } => "io",
            Error::Decode { .. } => "decode",
            Error::Ingest { .. } => "ingest",
            Error::Format { .. } => "format",
            Error::Config(_) => "config",
        }
    }
}
