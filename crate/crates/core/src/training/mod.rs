//! Losses, optimizer, task scheduling and the training loop.

mod loss;
mod optim;
mod plan;
mod run;

pub use loss::{bce, icr_batch, icr_loss, task_loss, vg_batch, vg_loss, vqa_batch, vqa_loss, PROB_CLAMP};
pub use optim::{adam_step, lr_schedule, AdamConfig, OptimizerState};
pub use plan::{
    build_task_sequence, derive_joint_plan, growing_stages, TaskSpec, TrainPlan, CURRICULUM_ORDER, DEFAULT_CYCLE,
};
pub use run::{curriculum_run, train, CurriculumOptions, LogRecord, Observer, StageReport, TaskPools, TrainOptions};
