//! Teacher/student assembly, supervised training, distillation and
//! checkpoint files.

mod adam;
mod checkpoint;
mod config;
mod network;
mod train;

pub use adam::{adam_step, clip_grad_norm, AdamConfig, AdamState};
pub use checkpoint::{
    load_checkpoint, load_checkpoint_expecting, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointMeta,
    CHECKPOINT_VERSION,
};
pub use config::{config_hash, ArchConfig, Selection, SplitMode, TrainConfig};
pub use network::{attack_probability, build_model, GatModel, GraphBatch, Mode};
pub use train::{distill_student, split_indices, train_teacher, EpochRecord, History, Split, Stage};

use thiserror::Error;

use crate::nn::NnError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("training split holds only label {0}; both classes are required")]
    SingleClassDataset(u8),
    #[error("architecture mismatch: expected {expected}, found {found}")]
    ArchMismatch { expected: String, found: String },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Nn(NnError::Tensor(e))
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;
