//! Dense image alignment with the inverse-compositional Lucas-Kanade
//! algorithm over multi-channel feature grids, plus the tooling to learn
//! alignment features by differentiating through the unrolled solver.

pub mod error;
pub mod extract;
pub mod datagen;
pub mod fgt;
pub mod grid;
pub mod harness;
pub mod loss;
pub mod solver;
pub mod training;
pub mod warp;

pub use error::{Error, Result};
pub use grid::{FeatureGrid, Grid, Sample, ValidityMask};
pub use warp::{Homography, WarpParams};
