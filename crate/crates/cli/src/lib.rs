//! Experiment driver: trajectory generation, grid sweeps over controller
//! variants, per-episode logs, posterior snapshots and summary reports.

pub mod posterior;
pub mod report;
pub mod spec;
pub mod suite;

pub use posterior::{export_posterior, load_posterior, PosteriorSnapshot};
pub use report::{read_report, write_report, Report};
pub use spec::{ExperimentSpec, Overrides, TrajectorySpec};
pub use suite::{run_cell, run_suite, train_gp};
