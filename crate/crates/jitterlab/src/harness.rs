//! Simulation harness: experiment configuration, deterministic seeding,
//! trial records, improvement factors, and the experiment drivers behind
//! the command-line binary.

pub mod config;
pub mod experiments;
pub mod improve;
pub mod records;
pub mod seed;

pub use config::{ConfigDraft, EmMode, ExperimentConfig, ExperimentKind};
pub use experiments::{
    run_compare, run_converge, run_experiment, run_improve, run_init_sensitivity,
    run_validate_likelihood, CompareOutput, ConvergeOutput, FactorRow, ImproveOutput,
    InitSensitivityOutput, ValidateOutput,
};
pub use improve::{improvement_factor, Improvement, MseCurve};
pub use records::{aggregate_records, mse_db, Aggregate, TrialRecord};
pub use seed::derive_seed;
