//! Configuration, initial conditions, CSV output, the refinement driver and
//! plotting: everything the command-line tool needs.

pub mod config;
pub mod ic;
pub mod output;
pub mod plot;
pub mod refine;

pub use config::{parse_config, RunConfig};
pub use ic::{initial_condition, InitialSpec, Preset};
pub use output::{read_snapshot, run_to_dir, write_entropy_log, write_snapshot, RunStatus, RunSummary};
pub use refine::{refinement_study, RefineReport};
