use std::path::PathBuf;

/// Everything a subcommand can fail with, mapped onto process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags or an unusable configuration.
    #[error("{0}")]
    Usage(String),
    /// A configuration problem traced to a file line or an override.
    #[error("{origin}: {message}")]
    Config { origin: String, message: String },
    /// A verification command ran and found a defect.
    #[error("{0}")]
    Check(String),
    #[error("{0}")]
    Divergence(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(jar_core::error::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Check(_) => 1,
            Self::Divergence(_) => 3,
            Self::Core(jar_core::error::Error::Divergence { .. }) => 3,
            Self::Usage(_) | Self::Config { .. } | Self::Core(_) => 2,
            Self::Io { .. } => 2,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}

impl From<jar_core::error::Error> for CliError {
    fn from(e: jar_core::error::Error) -> Self {
        match e {
            jar_core::error::Error::Divergence { step, loss } => {
                Self::Divergence(format!("training diverged at step {step} (loss {loss})"))
            }
            other => Self::Core(other),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
