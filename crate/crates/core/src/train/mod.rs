//! Synthetic data, augmentation, AdamW with poly decay, mIoU and checkpoints.

mod augment;
mod checkpoint;
mod config;
mod data;
mod metrics;
mod optim;
mod trainer;

pub use augment::{apply_plan, augment, crop, draw_plan, flip_horizontal, rescale, scaled_extent, AugmentPlan};
pub use checkpoint::{Checkpoint, FIRST_MOMENT_SUFFIX, MAGIC, SECOND_MOMENT_SUFFIX};
pub use config::TrainConfig;
pub use data::{make_synth_dataset, synth_scenes, Region, SampleSource, Scene, SegSample, Shape, IGNORE_INDEX};
pub use metrics::{ConfusionMatrix, MiouReport};
pub use optim::{adamw_step, poly_lr, OptimState};
pub use trainer::{collate, eval_miou, iteration_rng, train, StepLog, TrainOutcome, Trainer};
