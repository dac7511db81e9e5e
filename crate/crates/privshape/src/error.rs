use std::io;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] privshape_core::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{key}: {msg}")]
    Config { key: String, msg: String },
    #[error("wire: {0}")]
    Wire(String),
    #[error("peer: {0}")]
    Peer(String),
}

impl Error {
    pub(crate) fn config(key: &str, msg: impl Into<String>) -> Self {
        Self::Config {
            key: key.to_string(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
