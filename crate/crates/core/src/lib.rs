//! Semi-supervised binary segmentation with cross-level (patch vs. full
//! image) contrastive learning and patch-image prediction consistency.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod patching;
pub mod training;

pub use error::{Error, Result};
