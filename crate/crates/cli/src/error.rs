use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    Missing(String),
    #[error("artifact mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Core(#[from] quadembed::Error),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Config(_) | CliError::Core(quadembed::Error::Config(_)) => 2,
            CliError::Missing(_) => 3,
            CliError::Mismatch(_) | CliError::Core(quadembed::Error::Format { .. }) => 4,
            CliError::Core(_) => 1,
        })
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}
