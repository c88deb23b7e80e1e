//! Config-driven experiments: generate, train, estimate, evaluate, report.

pub mod config;
pub mod pipeline;
pub mod report;

pub use config::{ExperimentConfig, ExperimentKind, Overrides};
pub use pipeline::{
    estimate, evaluate, generate, ground_truths, query_points, run_estimate, run_experiment, run_generate,
    run_report, run_train, train, QueryPoint, RunSummary, TrainedModels,
};
pub use report::{aggregate, AggregateRow, EstimateRow, ReportRow};
