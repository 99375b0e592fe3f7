//! Layered pixel embeddings for amodal instance segmentation.
//!
//! The crate is organised around the pipeline it implements:
//!
//! - [`scenegen`] synthesises occluded-shape scenes and their two-layer ground truth,
//! - [`losscore`] is the layered discriminative loss with analytic gradients,
//! - [`net`] holds a small convolutional predictor, its training loop and an oracle predictor,
//! - [`cluster`] groups embeddings into layer-consistent instances,
//! - [`eval`] scores detections with occlusion-stratified AP/AR,
//! - [`harness`] runs the ablation experiments and backs the CLI.

pub mod cluster;
pub mod error;
pub mod eval;
pub mod harness;
pub mod losscore;
pub mod net;
pub mod raster;
pub mod rle;
pub mod rng;
pub mod scenegen;

pub use error::{Error, Result};
