//! Dense RGB-D SLAM on a 3D Gaussian splatting map, with dynamic objects
//! filtered by clustering their per-object rendering-loss flows.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod dynamic;
pub mod error;
pub mod eval;
pub mod image;
pub mod loss;
pub mod mapper;
pub mod pipeline;
pub mod render;
pub mod scene;
pub mod tracker;

pub use error::{Error, Result};
