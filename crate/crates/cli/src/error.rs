use std::path::PathBuf;

use har_core::HarError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact {path}: run `har {stage}` first")]
    MissingArtifact { stage: String, path: PathBuf },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] HarError),
}

impl CliError {
    /// 0 ok, 2 config error, 3 missing artifact, 4 numeric failure, 1 anything
    /// else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Core(HarError::InvalidParameter(_)) => 2,
            CliError::MissingArtifact { .. } => 3,
            CliError::Core(HarError::NonFinite(_) | HarError::Diverged { .. } | HarError::NotPositiveDefinite(_)) => 4,
            CliError::Io { .. } | CliError::Core(_) => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}
