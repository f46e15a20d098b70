//! Spiking-convolution simulation engine for LiDAR bird's-eye-view object
//! detection.
//!
//! The pipeline: point clouds rasterize into 3-channel BEV grids
//! ([`bev`]), a learnable rate coder turns them into integer spike counts
//! ([`codec`]), an Integrate-and-Fire convolutional graph with 4-bit
//! weights and 6-bit thresholds runs exact integer inference ([`neuron`],
//! [`qtensor`], [`net`]), three heads decode into rotated BEV boxes
//! ([`codec`]), and rotated-IoU Average Precision plus spike-activity
//! accounting score the result ([`eval`]). Training is quantization-aware
//! with a full-precision shadow model ([`train`]); models persist in the
//! packed SPKL format ([`model`]).

pub mod bev;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod grid;
pub mod model;
pub mod net;
pub mod neuron;
pub mod qtensor;
pub mod train;

pub use error::{Error, Result};
