//! The recasting engine: per-block activation-mimicking training,
//! sequential recasting over the whole network, KD fine-tuning, and plan
//! construction/validation.

mod plan;
mod train;

pub use plan::{make_compression_plan, PlanAction, RecastPlan};
pub use train::{
    evaluate, kd_finetune, kd_loss, mse_activation_loss, recast_block_step, refresh_bn_stats,
    sequential_recast, train_backprop, RecastConfig, RecastLog, RecastStep, StepLog, TrainLog,
};

use thiserror::Error;

use crate::net::NetError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("plan has {plan_blocks} actions but the teacher has {teacher_blocks} blocks")]
    PlanLength {
        plan_blocks: usize,
        teacher_blocks: usize,
    },
    #[error("block {index}: {source_kind} -> {target_kind} ({out_channels} ch, source {source_out} ch) is not a supported recasting pair")]
    InvalidPair {
        index: usize,
        source_kind: String,
        target_kind: String,
        out_channels: usize,
        source_out: usize,
    },
    #[error("plan block {index}: {msg}")]
    PlanBlock { index: usize, msg: String },
    #[error("plan file line {line}: {msg}")]
    PlanParse { line: usize, msg: String },
    #[error("activation shape mismatch at block {index}: student {student:?} vs teacher {teacher:?} (next-block rebuild skipped?)")]
    ActivationMismatch {
        index: usize,
        student: Vec<usize>,
        teacher: Vec<usize>,
    },
    #[error("teacher has {teacher} classes but student has {student}")]
    ClassMismatch { teacher: usize, student: usize },
    #[error("width multiplier must be in (0,1), got {0}")]
    BadMultiplier(f64),
    #[error("compression plan found no basic or convolution blocks to shrink")]
    NothingToCompress,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
