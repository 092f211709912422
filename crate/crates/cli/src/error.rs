//! Error classification and exit codes.

use std::io::ErrorKind;
use std::path::Path;

use pachubert_autodiff::CheckpointError;
use pachubert_core::audio::AudioError;
use pachubert_core::dsp::DspError;
use pachubert_core::eval::EvalError;
use pachubert_core::formats::FormatError;
use pachubert_core::labels::LabelError;
use pachubert_model::ModelError;
use pachubert_train::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Input(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "bad-config",
            CliError::Input(_) => "bad-input",
            CliError::Numerical(_) => "numerical",
            CliError::Other(_) => "failure",
        }
    }

    /// `error code=<n> kind=<kind>: <message>` on one line.
    pub fn line(&self) -> String {
        format!("error code={} kind={}: {}", self.exit_code(), self.kind(), self.to_string().replace('\n', " "))
    }

    pub fn missing(path: &Path) -> Self {
        CliError::Input(format!("missing input {}", path.display()))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io(e: &std::io::Error) -> CliError {
    match e.kind() {
        ErrorKind::NotFound | ErrorKind::UnexpectedEof | ErrorKind::InvalidData => CliError::Input(e.to_string()),
        _ => CliError::Other(e.to_string()),
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        io(&e)
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        match &e {
            FormatError::Io(inner) if inner.kind() != ErrorKind::NotFound => CliError::Other(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Format(f) => f.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<AudioError> for CliError {
    fn from(e: AudioError) -> Self {
        match &e {
            AudioError::Io(inner) => io(inner),
            AudioError::Write { .. } => CliError::Other(e.to_string()),
            AudioError::SampleRate { .. } => CliError::Config(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<DspError> for CliError {
    fn from(e: DspError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<LabelError> for CliError {
    fn from(e: LabelError) -> Self {
        match e {
            LabelError::NonFinite => CliError::Numerical(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Audio(a) => a.into(),
            ModelError::Dsp(d) => d.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Audio(a) => a.into(),
            TrainError::Io(i) => i.into(),
            TrainError::Label(l) => l.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}
