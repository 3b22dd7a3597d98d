//! Scenario files, run directories, checkpoints and trajectory export for
//! mean-field flocking experiments built on `flocknrl-core`.

pub mod checkpoint;
pub mod error;
pub mod export;
pub mod rundir;
pub mod scenario;
mod table;

pub use error::{Error, Result};
pub use export::{eval_run, export_trajectories, simulate, Controller, Trajectories};
pub use rundir::{run_scenario, RunDir};
pub use scenario::Scenario;
