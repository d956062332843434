//! File formats, experiment configuration, the run matrix and reports for
//! the structural feature-autoencoder.

pub mod archive;
pub mod checkpoint;
pub mod config;
mod error;
pub mod report;
pub mod runner;
pub mod volume_io;

pub use error::{Error, Result};
