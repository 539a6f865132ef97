use thiserror::Error;

use instrec_core::PipelineError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("backend: {0}")]
    Backend(String),
    #[error("invariant: {0}")]
    Invariant(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) => 2,
            CliError::Backend(_) => 3,
            CliError::Invariant(_) => 4,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        if e.backend_error().is_some() {
            return CliError::Backend(e.to_string());
        }
        match e {
            PipelineError::Precondition(m) => CliError::Usage(m),
            PipelineError::Io(e) => CliError::Io(e.to_string()),
            other => CliError::Invariant(other.to_string()),
        }
    }
}
