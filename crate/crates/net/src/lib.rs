//! Desk-scale multi-task network for stacked-object grasping: a small
//! convolutional backbone, multi-scale feature aggregation, and detector,
//! grasp and relation heads trained in two stages.

use stackgrasp_core::PlanError;
use stackgrasp_tensor::{CheckpointError, TensorError};
use thiserror::Error;

pub mod check;
pub mod config;
pub mod infer;
pub mod loss;
pub mod model;
pub mod targets;
pub mod train;

pub use config::{ConfigError, ModelConfig, Optimizer};
pub use infer::{infer_scene, infer_scene_lenient, predict, Inference, Prediction};
pub use loss::{scene_targets, LossValues, SceneTargets};
pub use model::{init_params, msfa_param_count, Graph};
pub use train::{train_stage, train_stage1, train_stage2, Sample, Stage, TrainLog};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("invalid data: {0}")]
    Data(String),
}
