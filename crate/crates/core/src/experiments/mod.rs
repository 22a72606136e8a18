//! Experiment orchestration: the algorithm matrix, figure data, ledger
//! fault scenarios and policy quality against the oracle.

mod chain;
mod config;
mod matrix;
mod plot;
mod quality;
mod stats;
mod summary;

pub use chain::{chain_scenarios, ChainReport, ChainScenario, NearestToDestination};
pub use config::{Algorithm, EvalConfig, ExperimentConfig};
pub use matrix::{
    eval_seed, evaluate_policies, load_policies, load_table, read_manifest, run_matrix, run_matrix_with, schedule,
    EvalRow, MetricsTable, RunStatus, TrainingRow,
};
pub use plot::{emit_plot_data, PLOT_FILES};
pub use quality::{policy_quality, six_uav_train_config, train_six_uav, QualityReport, SnapshotScore};
pub use stats::{mean, sample_std, SignTest};
pub use summary::{compare, delay_by_load, delay_monotone, Comparison};
