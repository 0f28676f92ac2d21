//! Synthetic tasks, experiment configuration, the training loop with its
//! CSV/JSON outputs, benchmarking, and the self-verification suite.

mod bench;
mod config;
mod run;
mod tasks;
mod verify;

pub use bench::{bench, optimizer_set, BenchReport, BenchRow};
pub use config::{ExperimentConfig, TaskKind};
pub use run::{
    build, median_ms, run_experiment, run_experiment_with, run_to_dir, sweep, MetricsRecord, RunArtifacts,
    write_json, RunOutcome, RunSummary, CSV_HEADER,
};
pub use tasks::{accuracy, generate_task, Task, TaskSizes};
pub use verify::{verify, CheckResult, VerifyOptions, VerifyReport};
