//! Intensity and smoothing transforms applied to a volume at test time.
//!
//! All transforms keep dims and spacing. Noise, gamma and contrast are
//! pointwise; blur is separable and runs either inside each 2D slice
//! perpendicular to `slice_axis` or over the full volume.

use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::rng::SeededRng;
use crate::types::{Augmentation, AugmentationSpec, Dims, TypeError, Volume};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("sigma must be finite and {expected}, got {value}")]
    InvalidSigma { value: f64, expected: &'static str },
    #[error("gamma must be finite and > 0, got {0}")]
    InvalidGamma(f64),
    #[error("alpha must be finite and > 0, got {0}")]
    InvalidAlpha(f64),
    #[error("beta must be finite, got {0}")]
    InvalidBeta(f64),
    #[error("slice axis must be 0, 1 or 2, got {0}")]
    InvalidSliceAxis(usize),
    #[error("gamma correction needs nonnegative intensities, found {value} at index {index}")]
    NegativeIntensity { index: usize, value: f64 },
    #[error("noise expects intensities normalized to [0, 1], found {value} at index {index}")]
    NotNormalized { index: usize, value: f64 },
    #[error(transparent)]
    Type(#[from] TypeError),
}

/// Truncated, renormalized 1D Gaussian with radius `ceil(3σ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel1D {
    sigma: f64,
    radius: usize,
    weights: Vec<f64>,
}

impl GaussianKernel1D {
    pub fn new(sigma: f64) -> Result<Self, AugmentError> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(AugmentError::InvalidSigma {
                value: sigma,
                expected: "> 0",
            });
        }
        let radius = (3.0 * sigma).ceil() as usize;
        let two_s2 = 2.0 * sigma * sigma;
        // Build one half and mirror it so the weights are exactly symmetric.
        let half: Vec<f64> = (0..=radius)
            .map(|i| (-((i * i) as f64) / two_s2).exp())
            .collect();
        let mut weights = Vec::with_capacity(2 * radius + 1);
        weights.extend(half.iter().rev());
        weights.extend(half.iter().skip(1));
        let sum: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= sum;
        }
        Ok(Self {
            sigma,
            radius,
            weights,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    /// `2 * radius + 1` weights, centre at index `radius`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Convolves every line along `axis` with edge replication.
///
/// Each output is written as the centre value plus a weighted sum of
/// deviations from it, so constant regions come back bit-exact.
fn convolve_axis(data: &[f64], dims: Dims, axis: usize, kernel: &GaussianKernel1D) -> Vec<f64> {
    let n = dims.0[axis];
    if n == 1 {
        return data.to_vec();
    }
    let stride = dims.stride(axis);
    let r = kernel.radius as isize;
    let w = kernel.weights();
    let mut out = vec![0.0; data.len()];
    let mut line = vec![0.0; n];
    for start in 0..data.len() {
        // Visit each line once, from its first element.
        if !(start / stride).is_multiple_of(n) {
            continue;
        }
        for (i, slot) in line.iter_mut().enumerate() {
            *slot = data[start + i * stride];
        }
        for i in 0..n {
            let centre = line[i];
            let mut acc = 0.0;
            for (k, &wk) in w.iter().enumerate() {
                let j = (i as isize + k as isize - r).clamp(0, n as isize - 1) as usize;
                acc += wk * (line[j] - centre);
            }
            out[start + i * stride] = centre + acc;
        }
    }
    out
}

/// Gaussian smoothing with standard deviation `sigma` voxels.
///
/// With `slice_axis = Some(a)` each slice perpendicular to `a` is blurred in
/// 2D; with `None` all three axes are convolved.
pub fn gaussian_blur(
    v: &Volume,
    sigma: f64,
    slice_axis: Option<usize>,
) -> Result<Volume, AugmentError> {
    let kernel = GaussianKernel1D::new(sigma)?;
    if let Some(axis) = slice_axis {
        if axis > 2 {
            return Err(AugmentError::InvalidSliceAxis(axis));
        }
    }
    let dims = v.dims();
    let mut data = v.data().to_vec();
    for axis in 0..3 {
        if slice_axis == Some(axis) {
            continue;
        }
        data = convolve_axis(&data, dims, axis, &kernel);
    }
    let (lo, hi) = v.min_max();
    for x in &mut data {
        *x = x.clamp(lo, hi);
    }
    Ok(v.with_data(data)?)
}

/// `n` i.i.d. draws from N(0, σ²), in stream order.
pub fn noise_field(n: usize, sigma: f64, rng: &mut SeededRng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sigma * z
        })
        .collect()
}

/// Additive zero-mean Gaussian noise on a `[0, 1]`-normalized volume,
/// clipped back to `[0, 1]`.
pub fn gaussian_noise(v: &Volume, sigma: f64, rng: &mut SeededRng) -> Result<Volume, AugmentError> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(AugmentError::InvalidSigma {
            value: sigma,
            expected: ">= 0",
        });
    }
    if let Some((index, &value)) = v
        .data()
        .iter()
        .enumerate()
        .find(|(_, &x)| !(0.0..=1.0).contains(&x))
    {
        return Err(AugmentError::NotNormalized { index, value });
    }
    if sigma == 0.0 {
        return Ok(v.clone());
    }
    let noise = noise_field(v.data().len(), sigma, rng);
    let data = v
        .data()
        .iter()
        .zip(noise)
        .map(|(&x, n)| (x + n).clamp(0.0, 1.0))
        .collect();
    Ok(v.with_data(data)?)
}

/// `I' = (I / I_max)^γ · I_max` with `I_max` the volume maximum.
pub fn gamma_correction(v: &Volume, gamma: f64) -> Result<Volume, AugmentError> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(AugmentError::InvalidGamma(gamma));
    }
    if let Some((index, &value)) = v.data().iter().enumerate().find(|(_, &x)| x < 0.0) {
        return Err(AugmentError::NegativeIntensity { index, value });
    }
    let (_, i_max) = v.min_max();
    if gamma == 1.0 || i_max == 0.0 {
        return Ok(v.clone());
    }
    let data = v
        .data()
        .iter()
        .map(|&x| (x / i_max).powf(gamma) * i_max)
        .collect();
    Ok(v.with_data(data)?)
}

/// `I' = α·I + β`, clipped to `[0, upper]`.
///
/// `upper` defaults to the input maximum; the pipeline passes 1 because it
/// transforms normalized volumes.
pub fn contrast_enhancement(
    v: &Volume,
    alpha: f64,
    beta: f64,
    upper: Option<f64>,
) -> Result<Volume, AugmentError> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(AugmentError::InvalidAlpha(alpha));
    }
    if !beta.is_finite() {
        return Err(AugmentError::InvalidBeta(beta));
    }
    if alpha == 1.0 && beta == 0.0 {
        return Ok(v.clone());
    }
    let hi = upper.unwrap_or_else(|| v.min_max().1).max(0.0);
    let data = v
        .data()
        .iter()
        .map(|&x| (alpha * x + beta).clamp(0.0, hi))
        .collect();
    Ok(v.with_data(data)?)
}

/// Applies one spec to a `[0, 1]`-normalized volume.
pub fn apply(
    spec: &AugmentationSpec,
    v: &Volume,
    rng: &mut SeededRng,
) -> Result<Volume, AugmentError> {
    match spec.kind {
        Augmentation::Identity => Ok(v.clone()),
        Augmentation::GaussianBlur { sigma } => gaussian_blur(v, sigma, spec.slice_axis),
        Augmentation::GaussianNoise { sigma } => gaussian_noise(v, sigma, rng),
        Augmentation::GammaCorrection { gamma } => gamma_correction(v, gamma),
        Augmentation::ContrastEnhancement { alpha, beta } => {
            contrast_enhancement(v, alpha, beta, Some(1.0))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;
    use crate::types::Spacing;

    fn line(values: &[f64]) -> Volume {
        Volume::new(
            "v",
            Dims::new(values.len(), 1, 1).unwrap(),
            Spacing::isotropic(),
            values.to_vec(),
        )
        .unwrap()
    }

    fn rng() -> SeededRng {
        SeededRng::new(2024, StreamKey::augmentation("v", 1))
    }

    #[test]
    fn kernel_shape() {
        let k = GaussianKernel1D::new(1.0).unwrap();
        assert_eq!(k.radius(), 3);
        assert_eq!(k.weights().len(), 7);
        let w = k.weights();
        for i in 0..3 {
            assert_eq!(w[i], w[6 - i]);
        }
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(GaussianKernel1D::new(0.4).unwrap().radius(), 2);
        assert!(GaussianKernel1D::new(0.0).is_err());
        assert!(GaussianKernel1D::new(f64::NAN).is_err());
    }

    #[test]
    fn blur_preserves_constant() {
        let d = Dims::new(5, 4, 3).unwrap();
        let v = Volume::new("c", d, Spacing::isotropic(), vec![0.37; d.len()]).unwrap();
        for sigma in [0.3, 1.0, 2.5] {
            assert_eq!(gaussian_blur(&v, sigma, Some(2)).unwrap(), v);
            assert_eq!(gaussian_blur(&v, sigma, None).unwrap(), v);
        }
    }

    #[test]
    fn blur_rejects_bad_sigma() {
        let v = line(&[0.0, 1.0]);
        assert!(matches!(
            gaussian_blur(&v, -1.0, None),
            Err(AugmentError::InvalidSigma { .. })
        ));
        assert!(matches!(
            gaussian_blur(&v, 1.0, Some(5)),
            Err(AugmentError::InvalidSliceAxis(5))
        ));
    }

    #[test]
    fn per_slice_blur_leaves_slices_independent() {
        // An impulse on slice z=1 must not leak into z=0 or z=2.
        let d = Dims::new(5, 5, 3).unwrap();
        let mut data = vec![0.0; d.len()];
        data[d.index(2, 2, 1)] = 1.0;
        let v = Volume::new("i", d, Spacing::isotropic(), data).unwrap();
        let b = gaussian_blur(&v, 1.0, Some(2)).unwrap();
        for z in [0, 2] {
            for y in 0..5 {
                for x in 0..5 {
                    assert_eq!(b.at(x, y, z), 0.0);
                }
            }
        }
        let b3 = gaussian_blur(&v, 1.0, None).unwrap();
        assert!(b3.at(2, 2, 0) > 0.0);
    }

    #[test]
    fn noise_zero_sigma_is_identity() {
        let v = line(&[0.0, 0.2, 1.0]);
        assert_eq!(gaussian_noise(&v, 0.0, &mut rng()).unwrap(), v);
    }

    #[test]
    fn noise_is_deterministic_and_clipped() {
        let v = line(&[0.0, 0.5, 1.0, 0.999, 0.001]);
        let a = gaussian_noise(&v, 0.3, &mut rng()).unwrap();
        let b = gaussian_noise(&v, 0.3, &mut rng()).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|x| (0.0..=1.0).contains(x)));
        assert_ne!(a, v);
    }

    #[test]
    fn noise_requires_normalized_input() {
        let v = line(&[0.0, 2.0]);
        assert!(matches!(
            gaussian_noise(&v, 0.1, &mut rng()),
            Err(AugmentError::NotNormalized { index: 1, .. })
        ));
        assert!(matches!(
            gaussian_noise(&line(&[0.5]), -0.1, &mut rng()),
            Err(AugmentError::InvalidSigma { .. })
        ));
    }

    #[test]
    fn gamma_examples() {
        let v = line(&[0.0, 0.5, 2.0, 1.3]);
        assert_eq!(gamma_correction(&v, 1.0).unwrap(), v);
        let g = gamma_correction(&v, 2.0).unwrap();
        assert_eq!(g.data()[1], 0.125);
        assert_eq!(g.data()[2], 2.0);
        let v = line(&[0.0, 0.5, 1.0]);
        assert_eq!(gamma_correction(&v, 2.0).unwrap().data(), &[0.0, 0.25, 1.0]);
        for gamma in [0.3, 0.8, 1.7, 4.0] {
            assert_eq!(gamma_correction(&v, gamma).unwrap().data()[2], 1.0);
        }
        let zero = line(&[0.0, 0.0]);
        assert_eq!(gamma_correction(&zero, 3.0).unwrap(), zero);
        assert!(matches!(
            gamma_correction(&v, 0.0),
            Err(AugmentError::InvalidGamma(_))
        ));
        assert!(matches!(
            gamma_correction(&line(&[-1.0, 1.0]), 2.0),
            Err(AugmentError::NegativeIntensity { index: 0, .. })
        ));
    }

    #[test]
    fn contrast_examples() {
        let v = line(&[0.1, 0.6]);
        assert_eq!(contrast_enhancement(&v, 1.0, 0.0, None).unwrap(), v);
        assert_eq!(
            contrast_enhancement(&v, 2.0, 0.0, Some(1.0)).unwrap().data(),
            &[0.2, 1.0]
        );
        let v = line(&[0.2, 0.8]);
        let out = contrast_enhancement(&v, 1.0, -0.5, None).unwrap();
        assert_eq!(out.data()[0], 0.0);
        assert!((out.data()[1] - 0.3).abs() < 1e-15);
        assert!(matches!(
            contrast_enhancement(&v, 0.0, 0.0, None),
            Err(AugmentError::InvalidAlpha(_))
        ));
    }

    #[test]
    fn contrast_default_upper_is_input_max() {
        let v = line(&[0.1, 0.6]);
        let out = contrast_enhancement(&v, 2.0, 0.0, None).unwrap();
        assert_eq!(out.data(), &[0.2, 0.6]);
    }

    #[test]
    fn apply_dispatch() {
        let v = line(&[0.1, 0.4, 0.9]);
        assert_eq!(apply(&AugmentationSpec::identity(), &v, &mut rng()).unwrap(), v);
        let gamma1 = AugmentationSpec::new(Augmentation::GammaCorrection { gamma: 1.0 }).unwrap();
        assert_eq!(apply(&gamma1, &v, &mut rng()).unwrap(), v);
        let noise = AugmentationSpec::new(Augmentation::GaussianNoise { sigma: 0.05 }).unwrap();
        assert_eq!(
            apply(&noise, &v, &mut rng()).unwrap(),
            apply(&noise, &v, &mut rng()).unwrap()
        );
    }
}
