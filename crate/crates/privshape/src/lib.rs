//! Experiment harness around `privshape-core`: UCR files, run
//! configuration, the line-based network transport and the commands behind
//! the `privshape` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod transport;
pub mod ucr;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
