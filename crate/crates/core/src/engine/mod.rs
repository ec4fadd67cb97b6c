//! Training, scoring and evaluation.

mod config;
mod data;
mod metrics;
mod report;
mod score;
mod train;

pub use config::{DataPaths, RunConfig};
pub use data::{load_dataset, load_prepared, sequence_dirs, PreparedSequence};
pub use metrics::auc_roc;
pub use report::{
    evaluate, evaluate_scores, median, AucPair, CategoryResult, EvalReport, ReportGrid, RunInfo, SequenceSummary,
    SequenceTrace,
};
pub use score::{score_sequence, smooth_scores, ScoreSeries};
pub use train::{load_checkpoint, save_checkpoint, spec_for, train, TrainOutcome, CONFIG_KEY};
