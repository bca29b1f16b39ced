use clc_core::{ModelError, StrategyError};

use crate::config::ConfigError;
use crate::dataset::DatasetError;
use crate::store::StoreError;
use crate::weights_io::WeightsError;

/// Process exit status for each error class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Config = 1,
    Data = 2,
    Invariant = 3,
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("model weights: {0}")]
    Weights(#[from] WeightsError),
    #[error("chunk store: {0}")]
    Store(#[from] StoreError),
    #[error("{context}: {source}")]
    Strategy { context: String, source: StrategyError },
    #[error("writing {path}: {source}")]
    Output { path: String, source: std::io::Error },
    #[error("query {0:?} not found in the dataset")]
    QueryNotFound(String),
    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

fn model_error_class(e: &ModelError) -> ExitCode {
    match e {
        ModelError::SequenceTooLong { .. } | ModelError::TokenOutOfRange(_) | ModelError::EmptyContext | ModelError::EmptyQuery => ExitCode::Data,
        ModelError::InvalidConfig(_) => ExitCode::Config,
        _ => ExitCode::Invariant,
    }
}

impl BenchError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            Self::Config(_) => ExitCode::Config,
            Self::Dataset(_) | Self::QueryNotFound(_) | Self::Output { .. } => ExitCode::Data,
            Self::Weights(WeightsError::Io { .. }) => ExitCode::Config,
            Self::Weights(WeightsError::Model(e)) => model_error_class(e),
            Self::Weights(_) => ExitCode::Data,
            Self::Store(StoreError::Model(e)) => model_error_class(e),
            Self::Store(_) => ExitCode::Data,
            Self::Strategy { source, .. } => match source {
                StrategyError::InvalidParameter(_) | StrategyError::MissingAuxModel | StrategyError::AuxMismatch(_) => ExitCode::Config,
                StrategyError::Model(e) => model_error_class(e),
                _ => ExitCode::Invariant,
            },
            Self::Invariant(_) => ExitCode::Invariant,
        }
    }

    pub(crate) fn output(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| Self::Output { path: path.display().to_string(), source }
    }
}

impl From<ModelError> for BenchError {
    fn from(e: ModelError) -> Self {
        match model_error_class(&e) {
            ExitCode::Config => Self::Config(ConfigError::Invalid(e.to_string())),
            ExitCode::Data => Self::Dataset(DatasetError::Invalid { line: 0, message: e.to_string() }),
            ExitCode::Invariant => Self::Invariant(e.to_string()),
        }
    }
}
