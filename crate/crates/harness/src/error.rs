use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("score model checkpoint not found at {0}; run `train-dm` first")]
    MissingCheckpoint(PathBuf),
    #[error("no traces found under {0}")]
    MissingTraces(PathBuf),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("plot: {0}")]
    Plot(String),
    #[error(transparent)]
    Core(#[from] udig_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    pub(crate) fn io(context: impl std::fmt::Display, source: std::io::Error) -> Self {
        Self::Io {
            context: context.to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
