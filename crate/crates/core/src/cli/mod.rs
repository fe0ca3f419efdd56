//! Config-driven experiment runner behind the `steinlab` binary.

mod config;
mod report;
mod runner;

pub use config::{
    ExperimentConfig, Expected, FisherDecl, Format, LoadedConfig, MeasureDecl, OutputConfig, PropagationDecl, ReferenceDecl, TaskDecl,
    SEED_OVERRIDE_ENV,
};
pub use report::{emit_report, plot_data, summary, write_all};
pub use runner::{run_tasks, RunOutcome};
