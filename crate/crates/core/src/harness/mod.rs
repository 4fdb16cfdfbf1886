//! Simulated rig, trial and sweep runners, logs and configuration.

pub mod checks;
pub mod config;
pub mod log;
pub mod plant;
pub mod trial;

pub use checks::{run_checks, CheckReport};
pub use config::{default_config_toml, load_config, parse_config};
pub use log::{write_logs, write_sweep, LogRow, RunLog};
pub use plant::{PlantConfig, PlantSim};
pub use trial::{
    mean_std, plan_and_execute, run_estimation, run_sweep, run_trial, success_check, EstimationOutcome, Execution,
    SuccessConfig, SweepResult, TrialConfig, TrialResult, SWEEP_THETA0,
};
