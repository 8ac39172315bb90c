//! Meta-learned per-pixel label reweighting for semi-supervised binary
//! segmentation: a small tape-based autodiff engine, an encoder-decoder
//! network, the meta-reweighting training step with pseudo-label
//! enhancement and a mean teacher, synthetic data, and evaluation metrics.
//!
//! The crate is `no_std` with `alloc`; file formats and the command line
//! live in `mlb-boot`.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod config;
pub mod data;
pub mod error;
pub mod grid;
pub mod kernels;
pub mod mask;
pub mod meta;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod ple;
pub mod tape;
pub mod teacher;
pub mod tensor;
pub mod train;

/// Number of segmentation classes (background and foreground).
pub const NUM_CLASSES: usize = 2;

pub use config::HyperConfig;
pub use error::{Error, Result};
pub use mask::LabelMask;
pub use meta::{clamp_normalize, meta_weight_maps, mlb_step, WeightMapPair, Weighting};
pub use model::{model_forward, pseudo_label, ModelParams, SegNet};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
