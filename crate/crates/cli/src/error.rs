use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at {locus}: {message}")]
    Config { locus: String, message: String },
    #[error(transparent)]
    Core(#[from] sciml_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("run diverged: {0}")]
    Diverged(String),
}

impl CliError {
    pub fn config(locus: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config {
            locus: locus.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// 2 for bad configuration or arguments, 3 for a diverged run, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use sciml_core::Error as E;
        match self {
            CliError::Config { .. } => 2,
            CliError::Diverged(_) => 3,
            CliError::Core(E::Diverged { .. }) => 3,
            CliError::Core(E::InvalidArgument(_) | E::Shape { .. } | E::InsufficientSmoothness(_) | E::Serialization(_)) => 2,
            CliError::Core(E::Singular(_)) | CliError::Io { .. } => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
