//! Training loop with bias-aware multi-task loss and early stopping, and
//! the seeded ablation harness built on it.

mod ablation;
mod config;
mod early_stopping;
mod loss;
mod run;

pub use ablation::{median, run_ablation, AblationRun, AblationTable, Stage};
pub use config::TrainConfig;
pub use early_stopping::{EarlyStopping, StopDecision};
pub use loss::{mapped_loss, multitask_loss, AffineMap, BiasMaps, LossMode};
pub use run::{
    batch_loss, train_model, train_on, train_step, write_run_records, EpochObserver, EpochRecord, RunRecord,
    TrainOutcome, TrainingSet, RUN_CSV_HEADER,
};
