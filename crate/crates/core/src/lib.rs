//! Feed-forward multi-view reconstruction into 3D Gaussians.

pub mod camera;
pub mod config;
pub mod error;
pub mod gaussian;
pub mod image;
pub mod mesh;
pub mod raster;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod unet;
pub mod verify;

pub use error::{Error, Result};
