//! Configuration, file formats and stage orchestration behind the
//! `spdc-epr` command.

pub mod config;
pub mod format;
pub mod pipeline;

pub use config::RunConfig;
