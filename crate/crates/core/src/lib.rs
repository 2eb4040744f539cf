//! Tile-based classification of grayscale microscopy-style images.
//!
//! The pipeline cuts each image into an `r x c` grid ([`tiling`]), classifies
//! every tile with a shared residual network ([`model`]) either through its
//! softmax head or through k-nearest neighbours in embedding space ([`knn`]),
//! and folds tile outputs into one image label by majority or probability
//! voting ([`aggregate`]). [`saliency`] produces Grad-CAM and Score-CAM maps
//! over the final convolutional features.

pub mod aggregate;
pub mod config;
pub mod datasets;
pub mod error;
pub mod experiment;
pub mod image;
pub mod knn;
pub mod model;
pub mod saliency;
pub mod tiling;
pub mod trainer;

pub use error::{Error, Result};
pub use image::GrayImage;
pub use tiling::{GridSpec, TileRecord, TileRect};

/// Number of exposure classes.
pub const NUM_CLASSES: usize = 4;

/// Class directory names, indexed by class ID.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["control", "20nM", "40nM", "100nM"];

pub fn class_id(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|&n| n == name)
}

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
