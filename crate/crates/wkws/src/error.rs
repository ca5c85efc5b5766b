use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("unsupported audio format in {path}: {reason}")]
    UnsupportedFormat { path: PathBuf, reason: String },

    #[error("{0}")]
    Domain(String),

    #[error("degenerate SNR: noise is silent under the keyword interval")]
    DegenerateSnr,

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("training failed at epoch {epoch}, step {step}: {reason}")]
    Train {
        epoch: usize,
        step: usize,
        reason: String,
    },

    #[error("record {index} ({path}): {source}")]
    Record {
        index: usize,
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("bad config: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
