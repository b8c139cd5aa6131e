//! Optimization, evaluation protocol and persistence.

mod checkpoint;
mod config;
mod cv;
mod folds;
mod metrics;
mod optim;
mod train;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use config::{RunConfig, SelectBy, TrainConfig};
pub use cv::{cross_eval, run_cv, save_checkpoints, CvOutcome, EvalReport, FoldReport, UAR_POLICY};
pub use folds::{plan_folds, Fold, FoldPlan};
pub use metrics::{confusion_matrix, uar, uar_from_confusion};
pub use optim::{Adam, PlateauScheduler};
pub use train::{attention_maps, evaluate, train_fold, EpochLog, Evaluation, TrainedModel};
