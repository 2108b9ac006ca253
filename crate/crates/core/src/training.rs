//! Phased training: a text-only pretraining stand-in for the language model,
//! projector alignment against a frozen model, LoRA multi-task fine-tuning,
//! and joint projector/channel-coder training under random channels.

mod checkpoint;
mod config;
mod phases;
mod system;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{LoraConfig, Phase, PhaseConfig, SystemConfig, Trainable};
pub use phases::{
    batch_indices, evaluate, fingerprint, model_fingerprint, phase1_align, phase2_finetune, phase3_joint, pretrain,
    train_phase, EvalReport, SnrPoint, TrainReport,
};
pub use system::{sample_backward, LossMode, M4scSystem, Prediction, Stages, SystemGrads};
