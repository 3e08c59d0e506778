//! Optimization, cross-validation harness, metrics, checkpoints and reports.

mod checkpoint;
mod fold;
mod gradcheck;
mod metrics;
mod optim;
mod report;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use fold::{evaluate, make_batches, train_fold, EvalOutput, FoldResult};
pub use gradcheck::{run_gradcheck, GradcheckOutcome, Scale};
pub use metrics::{argmax, auc, compute_metrics, Metrics};
pub use optim::{AdamW, Moments};
pub use report::{
    collect_reports, cross_validate, published_reference, run_ablation, runs_csv, summarize, sweep_k,
    sweep_modalities, write_fold, AblationReport, AblationRow, FoldRow, ParamCounts, ReferenceRow, RunReport,
    Stat, SweepPoint, SweepReport,
};
