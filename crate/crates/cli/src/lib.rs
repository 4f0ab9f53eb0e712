//! Batch front end for ergodic-risk constrained LQR experiments: JSON
//! experiment configs, seeded random instances, and the
//! `synthesize | simulate | certify | randgen | compare` commands with their
//! CSV/JSON artifacts.

pub mod commands;
pub mod config;
pub mod error;
pub mod instance;
pub mod output;

pub use commands::{run, Command, SolutionFile};
pub use config::{ExperimentConfig, SCHEMA};
pub use error::{CliError, CliResult};
pub use instance::{random_instance, InstanceSpec};
