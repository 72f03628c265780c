//! Time-indexed gaussian avatars.
//!
//! A canonical set of 3D gaussians is modulated over time by a multi-scale
//! hex-plane codebook and a small decoder, warped into the observation space
//! with linear blend skinning, and splatted by a tile-based CPU rasterizer.
//! Novel motion is animated by retrieving codebook timestamps whose recorded
//! poses best match the incoming pose sequence.

pub mod archive;
pub mod avatar;
mod binio;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod hexplane;
pub mod loss;
pub mod math;
pub mod nn;
pub mod rasterizer;
pub mod retrieval;
pub mod skinning;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
