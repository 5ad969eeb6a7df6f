//! File formats, run configuration and experiment drivers for the `rdcm`
//! command-line tool. The numerics live in [`rdcm_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;

pub use error::{Result, RunError};
pub use rdcm_core as core;
