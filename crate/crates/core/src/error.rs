use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("incomplete sequence: mask token at position {0}")]
    IncompleteSequence(usize),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("scene generation failed after {attempts} attempts (seed {seed}): {reason}")]
    Generation { seed: u64, attempts: usize, reason: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("stale cache: cache built for params version {cache}, params are at {params}")]
    StaleCache { cache: u64, params: u64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short category tag, used as the stderr prefix by the command-line tool.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Range(_) => "range",
            Error::IncompleteSequence(_) => "incomplete",
            Error::Contract(_) => "contract",
            Error::Degenerate(_) => "degenerate",
            Error::Generation { .. } => "generation",
            Error::NonFinite(_) => "numeric",
            Error::StaleCache { .. } => "stale-cache",
            Error::Format(_) => "format",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
