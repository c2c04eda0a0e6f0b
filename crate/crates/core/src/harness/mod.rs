//! Experiment configuration, persistence and drivers.

mod checkpoint;
mod config;
mod experiment;

pub use checkpoint::{
    load_checkpoint, read_manifest, save_checkpoint, ArtifactRefs, Checkpoint, Manifest, TensorEntry,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{ExperimentConfig, CONFIG_VERSION};
pub use experiment::{
    compare_strategies, fisher_for, mask_for, metrics_lines, plan_fixed_proportion, prepare, render_report,
    resolve_k, run_experiment, run_fixed_proportion, run_with_scores, train_prepared, write_comparison,
    ComparisonTable, ExperimentReport, MetricsRecord, Prepared, ProportionPlan, SweepRun, CHECKPOINT_FILE,
    COMPARISON_JSON, COMPARISON_TSV, CONFIG_FILE, FISHER_FILE, MASK_FILE, METRICS_FILE, REPORT_FILE,
};
