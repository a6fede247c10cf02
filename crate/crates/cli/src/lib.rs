//! Library side of the `ttbnn` command-line tool: configuration files, the
//! checksummed model archive format and the command implementations.

pub mod archive;
pub mod commands;
pub mod config;
pub mod error;

pub use archive::{load_archive, save_archive, ArchiveError, Metadata, ModelArchive};
pub use config::{DataSource, Experiment, ExperimentConfig, TrainerKind};
pub use error::CliError;
