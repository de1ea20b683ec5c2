use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no effective tokens")]
    NoEffectiveTokens,

    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("input of {len} tokens exceeds context length {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("unknown corpus tag {0:?}")]
    UnknownTag(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("missing path {0}")]
    MissingPath(PathBuf),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {message}")]
    Numerical { message: String, sequences: Vec<String> },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category used by the CLI error record.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Shape(_) => "shape",
            Error::NoEffectiveTokens => "no_effective_tokens",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::ContextOverflow { .. } => "context_overflow",
            Error::UnknownTag(_) => "unknown_tag",
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::MissingPath(_) => "missing_path",
            Error::Data(_) => "data",
            Error::Numerical { .. } => "numerical",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
        }
    }

    /// Process exit code: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => 1,
            Error::Numerical { .. } => 3,
            _ => 2,
        }
    }
}
