use regimeflow::ingest::IngestError;
use regimeflow::synth::SynthError;
use regimeflow::PipelineError;
use thiserror::Error;

/// Exit code 1: bad input or configuration. Exit code 2: failure while running.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match &e {
            PipelineError::Config(_) | PipelineError::Data(_) => CliError::Validation(e.to_string()),
            PipelineError::Ingest(inner) => CliError::from_ingest(inner, e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        let msg = e.to_string();
        CliError::from_ingest(&e, msg)
    }
}

impl CliError {
    fn from_ingest(e: &IngestError, msg: String) -> Self {
        match e {
            IngestError::Io(_) => CliError::Runtime(msg),
            _ => CliError::Validation(msg),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("io: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(format!("csv: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(format!("json: {e}"))
    }
}
