use lens_core::backends::BackendError;
use lens_core::evaluation::EvalError;
use lens_core::prompting::PromptError;
use lens_core::reasoning::ReasoningError;
use lens_core::vision::VisionError;
use lens_core::vocabulary::VocabularyError;
use lens_core::PipelineError;
use thiserror::Error;

/// Failure classes of the command-line tool. Each maps to a process exit
/// code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Backend(String),
    /// A backend could not be reached or loaded.
    #[error("{0}")]
    Unavailable(String),
    #[error("{0}")]
    Image(String),
    #[error("{0}")]
    FailureRate(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 1,
            Self::Backend(_) | Self::Unavailable(_) => 2,
            Self::Image(_) => 3,
            Self::FailureRate(_) => 4,
            Self::Usage(_) => 64,
        }
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::ImageDecode { .. } => Self::Image(e.to_string()),
            BackendError::InvalidParams(_) => Self::Config(e.to_string()),
            BackendError::Unavailable(_) => Self::Unavailable(e.to_string()),
            _ => Self::Backend(e.to_string()),
        }
    }
}

impl From<VisionError> for CliError {
    fn from(e: VisionError) -> Self {
        match e {
            VisionError::Backend(b) => b.into(),
            other => Self::Config(other.to_string()),
        }
    }
}

impl From<PromptError> for CliError {
    fn from(e: PromptError) -> Self {
        match e {
            PromptError::MissingQuestion => Self::Usage(e.to_string()),
            other => Self::Config(other.to_string()),
        }
    }
}

impl From<ReasoningError> for CliError {
    fn from(e: ReasoningError) -> Self {
        match e {
            ReasoningError::Backend(b) => b.into(),
            other => Self::Config(other.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Vision(v) => v.into(),
            PipelineError::Prompt(p) => p.into(),
            PipelineError::Reasoning(r) => r.into(),
        }
    }
}

impl From<VocabularyError> for CliError {
    fn from(e: VocabularyError) -> Self {
        match e {
            VocabularyError::Backend(b) => b.into(),
            other => Self::Config(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Vision(v) => v.into(),
            EvalError::FailureRateExceeded { .. } => Self::FailureRate(e.to_string()),
            other => Self::Config(other.to_string()),
        }
    }
}
