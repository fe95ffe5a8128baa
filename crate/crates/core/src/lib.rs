//! Few-shot single-view voxel reconstruction with learned class shape priors.
//!
//! The crate is organised bottom-up:
//!
//! - [`voxel`]: occupancy grids, IoU/proximity metrics, binvox files.
//! - [`synth`]: a procedural image/shape generator used as a desk-scale dataset.
//! - [`nn`]: tensors, layers with hand-written backward passes, the image
//!   encoder and voxel decoder, sparsemax, optimizers and checkpoints.
//! - [`priors`]: class-conditioning mechanisms (global embeddings, codebook
//!   compositions, conditional batch norm banks, attention blocks, average shapes).
//! - [`model`]: the conditioned encoder–decoder assembled from the above.
//! - [`train`]: base training, few-shot adaptation and retrieval baselines.
//! - [`distill`]: k-medoids dataset distillation on `1 − IoU` distances.
//! - [`eval`]: per-class evaluation, relative gains, ablations and reports.

pub mod distill;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod priors;
pub mod seed;
pub mod synth;
pub mod train;
pub mod voxel;

pub use error::{Error, ErrorKind, Result};
