//! Training, evaluation and the leave-one-region-out benchmark.

pub mod loro;
pub mod metrics;
pub mod train;

pub use loro::{
    held_out_run, leave_one_region_out, mean_std, timelines, train_on_regions, upper_bound_runs, CellStats, LoroConfig,
    LoroTable, RunMode, RunRecord, TableRow,
};
pub use metrics::{class_f1, confusion_matrix, EvalReport};
pub use train::{evaluate_checkpoint, evaluate_examples, logits, predict, prepare_examples, train, EpochLog, Example, TrainConfig, TrainOutcome};
