//! Three-stage training orchestration: mixture schedulers, the learning-rate
//! table, AdamW with global-norm clipping, binary checkpoints, and the
//! single-worker training loop.

mod checkpoint;
mod mix;
mod optim;
mod runner;

use std::path::PathBuf;

use thiserror::Error;

use crate::data::{DataError, TaskKind};
use crate::pack::PackError;
use crate::tensor::TensorError;

pub use checkpoint::{
    config_digest, load_checkpoint, save_checkpoint, Checkpoint, Moments, RngState,
    CHECKPOINT_VERSION,
};
pub use mix::{lr_at, mix_weights, LrSchedule, MixSchedule, StageConfig, StagePlan};
pub use optim::{clip_global_norm, global_grad_norm, AdamW, Grads, MomentTable};
pub use runner::{
    stream_rng, train, LossRow, TrainConfig, TrainOutcome, ValConfig, ValRow, INIT_STREAM,
    TRAIN_STREAM, VAL_STREAM,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("step {step} outside a stage of {steps} steps")]
    StepOutOfRange { step: u64, steps: u64 },
    #[error("no records for scheduled task {task}")]
    EmptyTask { task: TaskKind },
    #[error("non-finite loss at step {step}; aborted, last good checkpoint kept")]
    NonFiniteLoss { step: u64 },
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("checkpoint version {got}, this build reads {want}")]
    VersionMismatch { got: u32, want: u32 },
    #[error("checkpoint was written under a different model config")]
    DigestMismatch,
    #[error("checkpoint file is truncated")]
    Truncated,
    #[error("checkpoint has {0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Pack(#[from] PackError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
