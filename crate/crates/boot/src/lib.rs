//! File formats, the experiment pipeline, and the command line around
//! [`mlb_seg_core`].

pub mod config;
pub mod error;
pub mod manifest;
pub mod mseg;
pub mod pgm;
pub mod pipeline;
pub mod report;
pub mod snapshot;

pub use config::{ExperimentConfig, Mode};
pub use error::{BootError, Result};
pub use pipeline::{run_ablation, run_experiment, RunOptions, Splits};
