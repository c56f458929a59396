use dm2rm::data::DataError;
use dm2rm::features::FeatureError;
use dm2rm::model::{CheckpointError, ModelError};
use dm2rm::retrieval::RetrievalError;
use dm2rm::training::TrainError;
use thiserror::Error;

/// A failed command, split by whether the input or the run was at fault.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Validation(_) => 1,
            Self::Runtime(_) => 2,
        }
    }

    pub fn validation(e: impl std::fmt::Display) -> Self {
        Self::Validation(e.to_string())
    }

    pub fn runtime(e: impl std::fmt::Display) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } => Self::runtime(e),
            _ => Self::validation(e),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Checkpoint(CheckpointError::Io(_)) => Self::runtime(e),
            ModelError::Config(_) | ModelError::Checkpoint(_) | ModelError::InvalidArgument(_) => {
                Self::validation(e)
            }
            _ => Self::runtime(e),
        }
    }
}

impl From<FeatureError> for CliError {
    fn from(e: FeatureError) -> Self {
        match e {
            FeatureError::Data(d) => d.into(),
            FeatureError::Lang { .. } => Self::validation(e),
            _ => Self::runtime(e),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => Self::validation(e),
            TrainError::Model(m) => m.into(),
            TrainError::Features(f) => f.into(),
            _ => Self::runtime(e),
        }
    }
}

impl From<RetrievalError> for CliError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::Features(f) => f.into(),
            RetrievalError::SmallPool { .. } | RetrievalError::NoCandidates => Self::validation(e),
            _ => Self::runtime(e),
        }
    }
}
