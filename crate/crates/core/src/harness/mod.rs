//! Training, checkpoints, evaluation and the command-line driver.

mod checkpoint;
pub mod cli;
mod config;
mod eval;
mod optim;
mod train;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, read_log, save_checkpoint, Checkpoint, LOG_FILE};
pub use config::{RunConfig, TrainConfig};
pub use eval::{
    denoise_export, global_features, linear_probe, zeroshot_classify, DenoiseReport, ProbeOptions,
};
pub use optim::{decays, lr_at, AdamW};
pub use train::{batch_gradients, pretrain_run, BatchGradients, StepRecord, Trainer, CSV_HEADER};

use crate::contrastive::ContrastiveError;
use crate::data::{DataError, PdcoError};
use crate::diffusion::DiffusionError;
use crate::geometry::GeometryError;
use crate::tensorcore::TensorError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl HarnessError {
    /// Process exit code: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::Data(_) => 2,
            HarnessError::Numeric(_) => 3,
        }
    }

    pub(crate) fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        HarnessError::Data(DataError::Io(format!("{}: {e}", path.display())))
    }
}

impl From<PdcoError> for HarnessError {
    fn from(e: PdcoError) -> Self {
        HarnessError::Data(e.into())
    }
}

impl From<GeometryError> for HarnessError {
    fn from(e: GeometryError) -> Self {
        HarnessError::Data(DataError::Invalid(e.to_string()))
    }
}

impl From<TensorError> for HarnessError {
    fn from(e: TensorError) -> Self {
        HarnessError::Numeric(e.to_string())
    }
}

impl From<DiffusionError> for HarnessError {
    fn from(e: DiffusionError) -> Self {
        HarnessError::Numeric(e.to_string())
    }
}

impl From<ContrastiveError> for HarnessError {
    fn from(e: ContrastiveError) -> Self {
        HarnessError::Numeric(e.to_string())
    }
}
