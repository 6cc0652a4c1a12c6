use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("empty observation window")]
    EmptyWindow,

    #[error("auc needs both classes present (positives={positives}, negatives={negatives})")]
    SingleClass { positives: usize, negatives: usize },

    #[error("sequence of {len} tokens exceeds backbone context of {context}")]
    ContextOverflow { len: usize, context: usize },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("missing required column `{0}`")]
    MissingColumn(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("agent failure: {0}")]
    Agent(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
