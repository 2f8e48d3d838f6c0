//! Anatomy-guided domain adaptation for point-cloud 3D human pose estimation.
//!
//! The crate is organized bottom-up:
//!
//! - [`skeleton`]: skeleton graph, poses, bone vectors, bound derivation
//! - [`anatomy`]: constraint losses with analytic gradients, pseudo-label filter
//! - [`model`]: point-feature network with a weighted-sum pose head, Adam, checkpoints
//! - [`trainer`]: task/consistency losses, EMA teacher, augmentation, training loops
//! - [`datagen`]: synthetic poses and clouds, domain shifts, preprocessing, datasets
//! - [`eval`]: MPJPE, mean-pose baseline, plausibility and correlation reports

pub mod anatomy;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod geom;
pub mod model;
pub mod skeleton;
pub mod trainer;

pub use error::{Error, Result};
