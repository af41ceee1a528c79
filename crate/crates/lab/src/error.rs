use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Core(#[from] rft_core::Error),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("missing artifact {path}; run the `{stage}` stage first")]
    MissingArtifact { path: PathBuf, stage: &'static str },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        source: Box<LabError>,
    },

    #[error("evaluation: {0}")]
    Eval(String),
}

impl LabError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// For callbacks that must return core errors.
    pub fn into_core(self) -> rft_core::Error {
        match self {
            LabError::Core(e) => e,
            other => rft_core::Error::InvalidArgument(other.to_string()),
        }
    }

    pub fn eval(msg: impl Into<String>) -> Self {
        LabError::Eval(msg.into())
    }
}
