use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Core(#[from] feel_core::Error),

    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
}

pub type SimResult<T> = Result<T, SimError>;

impl SimError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        SimError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        SimError::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }

    /// 1 invariant violation, 2 usage/config, 3 I/O or file format.
    pub fn exit_code(&self) -> i32 {
        use feel_core::Error as E;
        match self {
            SimError::Usage(_) => 2,
            SimError::Io { .. } | SimError::Format { .. } | SimError::Csv(_) => 3,
            SimError::Invariant(_) => 1,
            SimError::Core(e) => match e {
                E::InvalidConfig(_) | E::InvalidGeometry(_) | E::Schedule { .. } => 2,
                E::CorruptPayload(_) | E::TemplateMismatch(_) => 3,
                _ => 1,
            },
        }
    }
}
