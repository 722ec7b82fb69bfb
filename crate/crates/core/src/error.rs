use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("dataset eliminated by core filter")]
    EmptyAfterFilter,

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A failure inside pipeline stage `stage`; exits with the cause's code.
    #[error("{stage}: {source}")]
    Context {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    /// A failed worker job (sweep point).
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Parse { .. }
            | Error::Format(_)
            | Error::EmptyAfterFilter
            | Error::Data(_)
            | Error::Io { .. }
            | Error::Json(_) => 3,
            Error::Numeric(_) => 4,
            Error::Context { source, .. } => source.exit_code(),
            Error::Stage { .. } => 5,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
