use std::path::Path;

use asmalign::align::AlignError;
use asmalign::asm::CorpusError;
use asmalign::encoder::EncoderError;
use asmalign::eval::EvalError;
use asmalign::pretrain::PretrainError;
use asmalign::synth::SynthError;
use asmalign::tokenizer::TokenizerError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    IncompatibleCheckpoint(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Pipeline(String),
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Io { .. } => "io",
            Self::IncompatibleCheckpoint(_) => "incompatible_checkpoint",
            Self::Input(_) => "input",
            Self::Pipeline(_) => "pipeline",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Io { .. } => 3,
            Self::IncompatibleCheckpoint(_) => 4,
            Self::Input(_) => 5,
            Self::Pipeline(_) => 1,
        }
    }
}

impl From<EncoderError> for CliError {
    fn from(e: EncoderError) -> Self {
        match e {
            EncoderError::IncompatibleCheckpoint(m) => Self::IncompatibleCheckpoint(m),
            EncoderError::Checkpoint(c) => Self::IncompatibleCheckpoint(c.to_string()),
            EncoderError::Config(m) => Self::Config(m),
            other => Self::Pipeline(other.to_string()),
        }
    }
}

impl From<AlignError> for CliError {
    fn from(e: AlignError) -> Self {
        match e {
            AlignError::Encoder(e) => e.into(),
            AlignError::Config(m) => Self::Config(m),
            e @ (AlignError::MissingField { .. } | AlignError::Asm { .. } | AlignError::Format(_)) => {
                Self::Input(e.to_string())
            }
            other => Self::Pipeline(other.to_string()),
        }
    }
}

impl From<PretrainError> for CliError {
    fn from(e: PretrainError) -> Self {
        match e {
            PretrainError::Encoder(e) => e.into(),
            PretrainError::Config(m) => Self::Config(m),
            other => Self::Pipeline(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Align(e) => e.into(),
            e @ (EvalError::PromptFormat { .. } | EvalError::DuplicateLabel(_) | EvalError::EmptyPromptSet) => {
                Self::Input(e.to_string())
            }
            other => Self::Pipeline(other.to_string()),
        }
    }
}

impl From<TokenizerError> for CliError {
    fn from(e: TokenizerError) -> Self {
        match e {
            e @ TokenizerError::VocabFormat { .. } => Self::Input(e.to_string()),
            other => Self::Pipeline(other.to_string()),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        Self::Input(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Template(t) => Self::Input(t.to_string()),
            other => Self::Config(other.to_string()),
        }
    }
}
