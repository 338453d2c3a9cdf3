//! Three-stage optimization: text-to-text pre-training, joint pre-training
//! on all four subtasks, and fine-tuning, plus checkpoint I/O and averaging.

mod checkpoint;
mod schedule;
mod trainer;

pub use checkpoint::{average_checkpoints, Checkpoint, CHECKPOINT_VERSION};
pub use schedule::{integer_expansion, LrSchedule, TaskRatios, TaskSchedule};
pub use trainer::{
    held_out_loss, parse_log, run_stage1_t2t, run_stage2_joint, run_stage3_finetune, Ablation, BatchSizes,
    CollapseConfig, LogRecord, Stage, StageConfig, StageOutput, TrainConfig, Trainer, LOG_HEADER,
};
