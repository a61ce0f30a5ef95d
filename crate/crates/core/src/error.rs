//! Crate-level error with the command-line exit-code contract.

use thiserror::Error;

use crate::config::ConfigError;
use crate::dataset::DatasetError;
use crate::evaluation::test_eval::EvalError;
use crate::hpo::HpoError;
use crate::manifest::DataError;
use crate::training::TrainError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Hpo(#[from] HpoError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

pub const EXIT_TRAINING: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;

fn train_code(e: &TrainError) -> i32 {
    match e {
        TrainError::Config(_) => EXIT_CONFIG,
        TrainError::Data(_) => EXIT_DATA,
        TrainError::Dataset(DatasetError::Volume(_) | DatasetError::UnknownPatient(_)) => EXIT_DATA,
        _ => EXIT_TRAINING,
    }
}

impl Error {
    /// 2 for config and usage errors, 3 for data errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => EXIT_CONFIG,
            Error::Data(_) => EXIT_DATA,
            Error::Train(e) => train_code(e),
            Error::Eval(e) => match e {
                EvalError::Config(_) => EXIT_CONFIG,
                EvalError::NoCompletedFolds(_) | EvalError::WeightsMissing { .. } | EvalError::NoTestPatients => EXIT_DATA,
                EvalError::Train(t) => train_code(t),
                _ => EXIT_TRAINING,
            },
            Error::Hpo(HpoError::Config(_)) => EXIT_CONFIG,
            Error::Hpo(_) | Error::Io(_) => EXIT_TRAINING,
        }
    }
}
