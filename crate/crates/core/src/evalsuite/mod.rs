//! Metrics, evaluation reports and train-and-evaluate harnesses for removal
//! sweeps and variant ablations.

mod harness;
mod metrics;
mod report;

pub use harness::{
    cell_dir, paired_wins, relative_drops, run_ablation, run_cell, run_cells, run_sparse_sweep,
    summarize_sweep, threads_from_env, AblationRow, AblationTable, CellKey, CellResult,
    ExperimentSetup, Metric, Stat, SweepRow, SweepTable,
};
pub use metrics::{accuracy, f1_score, macro_f1, majority_vote, micro_f1, sign_test_p, F1Average};
pub use report::{
    evaluate, AnnotatorMetrics, ConsensusMetrics, EchoPredictor, EvalOptions, MetricsReport, Predictor,
};
