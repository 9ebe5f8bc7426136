//! Test-time augmentation ensembles for volumetric segmentation.
//!
//! A volume is perturbed by a small set of intensity and smoothing
//! transforms, every configured backend predicts a probability map on the
//! original and on each perturbed view, and the maps are fused per voxel by
//! majority, confidence-weighted or thresholded confidence-weighted voting.
//! Results are scored with overlap metrics and the 95th-percentile Hausdorff
//! distance.

pub mod augment;
pub mod backend;
pub mod fusion;
pub mod metrics;
pub mod nifti;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod runlog;
pub mod types;

pub use types::{
    normalize_intensity, Augmentation, AugmentationSpec, Dims, IntensityRange, LabelMask,
    ProbabilityMap, Spacing, TypeError, Volume,
};
