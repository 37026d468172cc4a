use std::path::PathBuf;

/// Broad failure classes; the CLI maps these onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Integrity,
    UpstreamMissing,
    Other,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("invalid record {id}: {message}")]
    InvalidRecord { id: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("missing upstream artifact {}: run `{producer}` first", path.display())]
    MissingArtifact { path: PathBuf, producer: String },

    #[error("cannot align char span [{start}, {end}) to tokens")]
    Alignment { start: usize, end: usize },

    #[error("sequence of {len} positions exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("idiom {0} has no definition")]
    MissingDefinition(String),

    #[error("unknown idiom {0}")]
    UnknownIdiom(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Parse { .. }
            | Error::InvalidRecord { .. }
            | Error::Validation(_)
            | Error::Config(_)
            | Error::Alignment { .. }
            | Error::SequenceTooLong { .. }
            | Error::MissingDefinition(_)
            | Error::UnknownIdiom(_) => ErrorKind::Validation,
            Error::Integrity(_) => ErrorKind::Integrity,
            Error::MissingArtifact { .. } => ErrorKind::UpstreamMissing,
            Error::Io { .. } | Error::Tensor(_) | Error::Json(_) => ErrorKind::Other,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
