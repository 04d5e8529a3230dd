//! Experiment harness: schedule inspection and metric sweeps over the
//! (kind, variant, S, sampler, kappa, seed) grid on Gaussian-mixture toys.

pub mod config;
pub mod inspect;
pub mod sweep;

pub use config::{DataSpec, ExperimentConfig, ModelChoice, SweepSampler};
pub use inspect::{inspect_schedule, InspectReport};
pub use sweep::{row_count, run_sweep, SweepOutput, SweepRow, SWEEP_SCHEMA};
