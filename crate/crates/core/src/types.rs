//! Shared domain objects: volumes, probability maps, label masks and the
//! augmentation descriptors consumed by the rest of the pipeline.
//!
//! Every constructor validates its invariants, so a value of one of these
//! types is always well formed. Dense arrays use a single memory order with
//! `x` varying fastest, then `y`, then `z`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Violation of a domain-type invariant.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TypeError {
    #[error("spacing component {axis} must be positive and finite, got {value}")]
    InvalidSpacing { axis: char, value: f64 },
    #[error("dimension {axis} must be at least 1, got {value}")]
    InvalidDims { axis: usize, value: usize },
    #[error("data length {actual} does not match dims product {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("num_classes must be in 2..=256, got {0}")]
    InvalidClassCount(usize),
    #[error("label {label} at index {index} is not below num_classes {num_classes}")]
    LabelOutOfRange { index: usize, label: u8, num_classes: usize },
    #[error("probability {value} for class {class} at voxel {voxel} is outside [0, 1]")]
    ProbabilityOutOfRange { voxel: usize, class: usize, value: f64 },
    #[error("probabilities at voxel {voxel} sum to {sum}, expected 1 within 1e-3")]
    NotProbabilistic { voxel: usize, sum: f64 },
    #[error("invalid augmentation parameter {name} = {value}")]
    InvalidAugmentation { name: &'static str, value: f64 },
    #[error("slice axis must be 0, 1 or 2, got {0}")]
    InvalidSliceAxis(usize),
}

/// Tolerance on the per-voxel probability sum accepted at ingestion.
pub const PROB_SUM_TOLERANCE: f64 = 1e-3;

/// Physical voxel size in millimeters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl Spacing {
    pub fn new(dx: f64, dy: f64, dz: f64) -> Result<Self, TypeError> {
        for (axis, value) in [('x', dx), ('y', dy), ('z', dz)] {
            if !(value.is_finite() && value > 0.0) {
                return Err(TypeError::InvalidSpacing { axis, value });
            }
        }
        Ok(Self { dx, dy, dz })
    }

    pub const fn isotropic() -> Self {
        Self { dx: 1.0, dy: 1.0, dz: 1.0 }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.dx, self.dy, self.dz]
    }

    /// Volume of one voxel in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.dx * self.dy * self.dz
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Self::isotropic()
    }
}

/// Grid extent `(nx, ny, nz)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims(pub [usize; 3]);

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self, TypeError> {
        for (axis, value) in [nx, ny, nz].into_iter().enumerate() {
            if value == 0 {
                return Err(TypeError::InvalidDims { axis, value });
            }
        }
        Ok(Self([nx, ny, nz]))
    }

    pub fn nx(&self) -> usize {
        self.0[0]
    }

    pub fn ny(&self) -> usize {
        self.0[1]
    }

    pub fn nz(&self) -> usize {
        self.0[2]
    }

    pub fn len(&self) -> usize {
        self.0[0] * self.0[1] * self.0[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear index of `(x, y, z)`.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.0[0] * (y + self.0[1] * z)
    }

    /// Inverse of [`Dims::index`].
    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.0[0];
        let rest = index / self.0[0];
        [x, rest % self.0[1], rest / self.0[1]]
    }

    /// Linear stride of one step along `axis`.
    pub fn stride(&self, axis: usize) -> usize {
        match axis {
            0 => 1,
            1 => self.0[0],
            _ => self.0[0] * self.0[1],
        }
    }
}

/// A 3D scalar intensity grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    id: String,
    dims: Dims,
    spacing: Spacing,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(
        id: impl Into<String>,
        dims: Dims,
        spacing: Spacing,
        data: Vec<f64>,
    ) -> Result<Self, TypeError> {
        if data.len() != dims.len() {
            return Err(TypeError::LengthMismatch {
                expected: dims.len(),
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TypeError::NonFinite { index });
        }
        Ok(Self {
            id: id.into(),
            dims,
            spacing,
            data,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Same geometry and id, new voxel values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self, TypeError> {
        Self::new(self.id.clone(), self.dims, self.spacing, data)
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.dims.index(x, y, z)]
    }
}

/// Affine map recorded by [`normalize_intensity`], used to go back to the
/// original intensity range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityRange {
    pub min: f64,
    pub max: f64,
}

impl IntensityRange {
    pub fn normalize(&self, value: f64) -> f64 {
        (value - self.min) / (self.max - self.min)
    }

    pub fn denormalize(&self, value: f64) -> f64 {
        value * (self.max - self.min) + self.min
    }

    /// Maps a normalized volume back to the recorded range.
    pub fn invert(&self, v: &Volume) -> Volume {
        let data = v.data().iter().map(|&x| self.denormalize(x)).collect();
        Volume {
            id: v.id.clone(),
            dims: v.dims,
            spacing: v.spacing,
            data,
        }
    }
}

/// Rescales a volume affinely onto `[0, 1]`.
///
/// A constant volume maps to all zeros with recorded range `(min, min + 1)`,
/// which keeps the inverse well defined.
pub fn normalize_intensity(v: &Volume) -> (Volume, IntensityRange) {
    let (lo, hi) = v.min_max();
    let range = if hi > lo {
        IntensityRange { min: lo, max: hi }
    } else {
        IntensityRange {
            min: lo,
            max: lo + 1.0,
        }
    };
    let data = v
        .data()
        .iter()
        .map(|&x| range.normalize(x).clamp(0.0, 1.0))
        .collect();
    let out = Volume {
        id: v.id.clone(),
        dims: v.dims,
        spacing: v.spacing,
        data,
    };
    (out, range)
}

fn check_class_count(num_classes: usize) -> Result<(), TypeError> {
    if (2..=256).contains(&num_classes) {
        Ok(())
    } else {
        Err(TypeError::InvalidClassCount(num_classes))
    }
}

/// Per-voxel categorical distribution over `num_classes` classes.
///
/// Stored voxel-major: the `C` class probabilities of one voxel are
/// contiguous, and voxels follow the canonical `x`-fastest order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    dims: Dims,
    num_classes: usize,
    probs: Vec<f64>,
    source_tag: String,
}

impl ProbabilityMap {
    /// Validates and renormalizes backend output.
    ///
    /// Values may stray outside `[0, 1]` and sums may deviate from 1 by at
    /// most [`PROB_SUM_TOLERANCE`]; anything further is rejected.
    pub fn new(
        dims: Dims,
        num_classes: usize,
        probs: Vec<f64>,
        source_tag: impl Into<String>,
    ) -> Result<Self, TypeError> {
        check_class_count(num_classes)?;
        let expected = dims.len() * num_classes;
        if probs.len() != expected {
            return Err(TypeError::LengthMismatch {
                expected,
                actual: probs.len(),
            });
        }
        let mut probs = probs;
        for (voxel, chunk) in probs.chunks_exact_mut(num_classes).enumerate() {
            let mut sum = 0.0;
            for (class, p) in chunk.iter().enumerate() {
                if !p.is_finite() {
                    return Err(TypeError::NonFinite {
                        index: voxel * num_classes + class,
                    });
                }
                if *p < -PROB_SUM_TOLERANCE || *p > 1.0 + PROB_SUM_TOLERANCE {
                    return Err(TypeError::ProbabilityOutOfRange {
                        voxel,
                        class,
                        value: *p,
                    });
                }
                sum += *p;
            }
            if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
                return Err(TypeError::NotProbabilistic { voxel, sum });
            }
            renormalize_voxel(chunk);
        }
        Ok(Self {
            dims,
            num_classes,
            probs,
            source_tag: source_tag.into(),
        })
    }

    /// One-hot map of a label mask, with `confidence` on the labelled class
    /// and the remainder shared equally among the others.
    pub fn softened(mask: &LabelMask, confidence: f64, source_tag: impl Into<String>) -> Self {
        let c = mask.num_classes();
        let rest = (1.0 - confidence) / (c - 1) as f64;
        let mut probs = vec![rest; mask.len() * c];
        for (voxel, &label) in mask.labels().iter().enumerate() {
            probs[voxel * c + label as usize] = confidence;
        }
        for chunk in probs.chunks_exact_mut(c) {
            renormalize_voxel(chunk);
        }
        Self {
            dims: mask.dims(),
            num_classes: c,
            probs,
            source_tag: source_tag.into(),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    pub fn with_source_tag(mut self, tag: impl Into<String>) -> Self {
        self.source_tag = tag.into();
        self
    }

    pub fn voxel(&self, index: usize) -> &[f64] {
        &self.probs[index * self.num_classes..(index + 1) * self.num_classes]
    }

    /// Re-applies the ingestion normalization. A map that is already
    /// normalized is returned unchanged.
    pub fn renormalized(&self) -> Self {
        let mut out = self.clone();
        for chunk in out.probs.chunks_exact_mut(out.num_classes) {
            renormalize_voxel(chunk);
        }
        out
    }

    /// Per-voxel argmax, ties to the lower class index.
    pub fn argmax(&self) -> LabelMask {
        let labels = self
            .probs
            .chunks_exact(self.num_classes)
            .map(|p| argmax_lowest(p) as u8)
            .collect();
        LabelMask {
            dims: self.dims,
            num_classes: self.num_classes,
            labels,
        }
    }
}

/// Index of the maximum, ties to the lowest index.
#[inline]
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Sums within this distance of 1 are left alone so renormalization is
/// idempotent.
const RENORM_SKIP: f64 = 1e-13;

fn renormalize_voxel(chunk: &mut [f64]) {
    for p in chunk.iter_mut() {
        *p = p.clamp(0.0, 1.0);
    }
    let sum: f64 = chunk.iter().sum();
    if (sum - 1.0).abs() > RENORM_SKIP && sum > 0.0 {
        for p in chunk.iter_mut() {
            *p /= sum;
        }
    }
}

/// Per-voxel integer class assignment.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMask {
    dims: Dims,
    num_classes: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(dims: Dims, num_classes: usize, labels: Vec<u8>) -> Result<Self, TypeError> {
        check_class_count(num_classes)?;
        if labels.len() != dims.len() {
            return Err(TypeError::LengthMismatch {
                expected: dims.len(),
                actual: labels.len(),
            });
        }
        if let Some(index) = labels.iter().position(|&l| l as usize >= num_classes) {
            return Err(TypeError::LabelOutOfRange {
                index,
                label: labels[index],
                num_classes,
            });
        }
        Ok(Self {
            dims,
            num_classes,
            labels,
        })
    }

    pub fn background(dims: Dims, num_classes: usize) -> Result<Self, TypeError> {
        Self::new(dims, num_classes, vec![0; dims.len()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.dims.index(x, y, z)]
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }
}

/// The transform family applied at test time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Augmentation {
    /// `sigma` in voxels.
    GaussianBlur { sigma: f64 },
    /// `sigma` in normalized intensity units.
    GaussianNoise { sigma: f64 },
    GammaCorrection { gamma: f64 },
    ContrastEnhancement { alpha: f64, beta: f64 },
    Identity,
}

impl Augmentation {
    pub fn name(&self) -> &'static str {
        match self {
            Self::GaussianBlur { .. } => "gaussian_blur",
            Self::GaussianNoise { .. } => "gaussian_noise",
            Self::GammaCorrection { .. } => "gamma_correction",
            Self::ContrastEnhancement { .. } => "contrast_enhancement",
            Self::Identity => "identity",
        }
    }
}

fn default_slice_axis() -> Option<usize> {
    Some(2)
}

/// One parameterized transform. `slice_axis` selects per-slice application
/// (slices perpendicular to that axis); `None` means fully volumetric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    #[serde(flatten)]
    pub kind: Augmentation,
    #[serde(default = "default_slice_axis")]
    pub slice_axis: Option<usize>,
}

impl AugmentationSpec {
    pub fn new(kind: Augmentation) -> Result<Self, TypeError> {
        let spec = Self {
            kind,
            slice_axis: default_slice_axis(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn volumetric(mut self) -> Self {
        self.slice_axis = None;
        self
    }

    pub fn identity() -> Self {
        Self {
            kind: Augmentation::Identity,
            slice_axis: default_slice_axis(),
        }
    }

    /// Mild defaults: blur σ=1 voxel, noise σ=0.05, γ=0.8, α=1.3 with β=0.
    pub fn default_set() -> Vec<Self> {
        [
            Augmentation::GammaCorrection { gamma: 0.8 },
            Augmentation::ContrastEnhancement {
                alpha: 1.3,
                beta: 0.0,
            },
            Augmentation::GaussianBlur { sigma: 1.0 },
            Augmentation::GaussianNoise { sigma: 0.05 },
        ]
        .into_iter()
        .map(|kind| Self {
            kind,
            slice_axis: default_slice_axis(),
        })
        .collect()
    }

    pub fn validate(&self) -> Result<(), TypeError> {
        let bad = |name, value: f64, ok: bool| {
            if ok && value.is_finite() {
                Ok(())
            } else {
                Err(TypeError::InvalidAugmentation { name, value })
            }
        };
        match self.kind {
            Augmentation::GaussianBlur { sigma } => bad("sigma", sigma, sigma > 0.0)?,
            Augmentation::GaussianNoise { sigma } => bad("sigma", sigma, sigma >= 0.0)?,
            Augmentation::GammaCorrection { gamma } => bad("gamma", gamma, gamma > 0.0)?,
            Augmentation::ContrastEnhancement { alpha, beta } => {
                bad("alpha", alpha, alpha > 0.0)?;
                bad("beta", beta, true)?;
            }
            Augmentation::Identity => {}
        }
        match self.slice_axis {
            Some(axis) if axis > 2 => Err(TypeError::InvalidSliceAxis(axis)),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    /// True for parameter choices that leave every voxel unchanged.
    pub fn is_noop(&self) -> bool {
        match self.kind {
            Augmentation::Identity => true,
            Augmentation::GammaCorrection { gamma } => gamma == 1.0,
            Augmentation::ContrastEnhancement { alpha, beta } => alpha == 1.0 && beta == 0.0,
            Augmentation::GaussianNoise { sigma } => sigma == 0.0,
            Augmentation::GaussianBlur { .. } => false,
        }
    }
}
