//! Attention-based latent-to-point-cloud decoders and the tooling to train
//! and evaluate them.
//!
//! The crate is `no_std` (with `alloc`). File formats, the command-line
//! front end and threaded execution live in the `axform` companion crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

mod error;

pub mod cloud;
pub mod data;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod nn_index;
pub mod params;
pub mod segmentation;
pub mod tensor;
pub mod training;

pub use cloud::{Point, PointCloud};
pub use error::{Error, Result};
pub use graph::{ChamferKind, Gradients, Graph, Var};
pub use params::{ParamId, ParamSet};
pub use tensor::Tensor;
