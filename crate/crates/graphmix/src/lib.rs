//! Command line, configuration, checkpoint and metrics files for the
//! `graphmix-core` learner.

pub mod checkpoint;
pub mod config;
mod error;
pub mod metrics;
pub mod run;

pub use error::Error;
