//! Expression and pose generators: training objectives, rollouts, emotion
//! transfer and the latent bank.

mod bank;
mod expflow;
mod export;
mod poseflow;
mod rollout;
mod train;

pub use bank::{LatentBank, BANK_VERSION, DEFAULT_K_PROJ};
pub use expflow::{
    all_frames, consistency_loss, ExpFlowConfig, ExpFlowModel, ExpFlowObjective, FrameBatch, MEANS,
};
pub use export::{frames_to_csv, write_csv};
pub use poseflow::{PoseBatch, PoseFlowConfig, PoseFlowModel, PoseFlowObjective};
pub use rollout::{
    emotion_transfer, rollout_expression, rollout_pose, Rollout, RolloutOptions, SamplingMode,
};
pub use train::{clip_global_norm, Objective, StepRecord, TrainConfig, Trainer};
