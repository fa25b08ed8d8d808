//! Multi-atlas label fusion for 3D binary segmentation.

pub mod crf;
pub mod error;
pub mod filters;
pub mod fusion;
pub mod io;
pub mod knn;
pub mod patch;
pub mod phantom;
pub mod pipeline;
pub mod similarity;
pub mod volume;

pub use error::{Error, Result};
