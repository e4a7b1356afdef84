//! Training: batching, the step with loss composition, runs with
//! validation and checkpoints, and the ablation grid.

mod ablate;
mod checkpoint;
mod config;
mod diagnostics;
mod run;
mod step;

pub use ablate::{ablation_csv, mean_std, run_ablation, run_grid, summarize, AblationRow, AblationSummary, DEFAULT_GRID};
pub use checkpoint::{checkpoint_config, checkpoint_load, checkpoint_save, Checkpoint};
pub use config::{parse_patch, TrainConfig};
pub use diagnostics::{pseudo_label_precision, PseudoPrecision, Tally};
pub use run::{
    evaluate_samples, predict_labels, prepare_split, run_experiment, run_on_split, EvalRecord, RunLog, RunOutput, Trainer,
    INIT_STREAM,
};
pub use step::{build_batch, train_step, Batch, StepRecord};
