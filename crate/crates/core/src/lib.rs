//! Lesion size reweighting for voxel-wise segmentation losses.
//!
//! The crate covers the full desk-scale pipeline: `LVOL1` grids, connected
//! lesion extraction, weight maps, loss functions with analytic gradients,
//! seeded synthetic phantoms, a small per-voxel segmenter, threshold-sweep
//! evaluation and the experiment runner that compares loss configurations.

pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod grid;
pub mod lesions;
pub mod metrics;
pub mod model;
pub mod loss;
pub mod par;
pub mod phantom;
pub mod svg;
pub mod weighting;

pub use error::{Error, Result};
