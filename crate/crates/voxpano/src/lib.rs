//! Post-processing and evaluation engine for camera-based panoptic
//! occupancy: decodes a network's semantic occupancy, center heatmap, and
//! center regression tensors into a panoptic voxel grid, and evaluates and
//! benchmarks the result.

pub mod appio;
pub mod assign;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod npy;
pub mod proposal;
pub mod synth;
pub mod targets;
pub mod tensors;

pub use error::{Error, Result};
