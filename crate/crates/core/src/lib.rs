//! Cross-sensor LiDAR range-image detection toolkit.
//!
//! Covers the non-learned parts of a range-image object detector: building
//! range images, simulating a low-resolution sensor from a high-resolution
//! one, pixel-wise target coding, post-processing of prediction maps and
//! KITTI-style evaluation.

pub mod error;
pub mod geometry;
pub mod range_image;
pub mod sensor;
pub mod codec;
pub mod model;
pub mod postprocess;
pub mod evaluation;
pub mod io;
pub mod synth;

pub use error::{Error, Result};
