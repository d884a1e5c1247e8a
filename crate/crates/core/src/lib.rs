//! Point-cloud auto-encoders built around a progressive seed-generation
//! decoder, with folding baselines, synthetic data and the reconstruction,
//! classification and completion pipelines.

pub mod classify;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod folding;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod psg;
pub mod report;
pub mod run;
pub mod train;

pub use error::{Error, Result};
pub use geometry::PointCloud;
