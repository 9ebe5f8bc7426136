//! Per-voxel fusion of probability maps into a label mask.
//!
//! Three rules are provided:
//!
//! * **majority**: each map votes for its argmax class;
//! * **confidence-weighted**: `argmax_c Σ_k w_k(x) P_k(x, c)` with
//!   `w_k(x) = max_c P_k(x, c)`;
//! * **threshold-weighted**: the weighted score is normalized by `Σ_k w_k(x)`
//!   and the winning class is kept only if its normalized score reaches `τ`;
//!   otherwise the voxel is background.
//!
//! Every tie resolves toward the lower class index. Maps are summed in
//! `source_tag` order so results do not depend on the order they were
//! collected in.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{argmax_lowest, LabelMask, ProbabilityMap, Spacing};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("fusion needs at least one probability map")]
    Empty,
    #[error("map {index} ({tag}) is inconsistent with the first map: {reason}")]
    InconsistentMaps {
        index: usize,
        tag: String,
        reason: String,
    },
    #[error("tau must be in (0, 1], got {0}")]
    InvalidTau(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VotingMode {
    Majority,
    ConfidenceWeighted,
    ThresholdWeighted,
}

impl VotingMode {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Majority => "majority",
            Self::ConfidenceWeighted => "confidence_weighted",
            Self::ThresholdWeighted => "threshold_weighted",
        }
    }
}

pub const DEFAULT_TAU: f64 = 0.6;

pub fn validate_tau(tau: f64) -> Result<(), FusionError> {
    if tau.is_finite() && tau > 0.0 && tau <= 1.0 {
        Ok(())
    } else {
        Err(FusionError::InvalidTau(tau))
    }
}

/// A validated, deterministically ordered set of maps to fuse.
#[derive(Debug, Clone)]
pub struct FusionInput<'a> {
    maps: Vec<&'a ProbabilityMap>,
    mode: VotingMode,
    tau: f64,
}

impl<'a> FusionInput<'a> {
    pub fn new(
        maps: impl IntoIterator<Item = &'a ProbabilityMap>,
        mode: VotingMode,
        tau: f64,
    ) -> Result<Self, FusionError> {
        validate_tau(tau)?;
        let mut maps: Vec<&ProbabilityMap> = maps.into_iter().collect();
        let first = *maps.first().ok_or(FusionError::Empty)?;
        for (index, m) in maps.iter().enumerate().skip(1) {
            let reason = if m.dims() != first.dims() {
                format!("dims {:?} vs {:?}", m.dims().0, first.dims().0)
            } else if m.num_classes() != first.num_classes() {
                format!("{} classes vs {}", m.num_classes(), first.num_classes())
            } else {
                continue;
            };
            return Err(FusionError::InconsistentMaps {
                index,
                tag: m.source_tag().to_string(),
                reason,
            });
        }
        maps.sort_by(|a, b| a.source_tag().cmp(b.source_tag()));
        Ok(Self { maps, mode, tau })
    }

    pub fn maps(&self) -> &[&'a ProbabilityMap] {
        &self.maps
    }

    pub fn mode(&self) -> VotingMode {
        self.mode
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn with_tau(&self, tau: f64) -> Result<Self, FusionError> {
        validate_tau(tau)?;
        Ok(Self {
            maps: self.maps.clone(),
            mode: self.mode,
            tau,
        })
    }

    fn num_classes(&self) -> usize {
        self.maps[0].num_classes()
    }

    fn build_mask(&self, decide: impl Fn(usize, &mut [f64]) -> u8 + Sync) -> LabelMask {
        const CHUNK: usize = 4096;
        let first = self.maps[0];
        let c = self.num_classes();
        let mut labels = vec![0u8; first.dims().len()];
        labels
            .par_chunks_mut(CHUNK)
            .enumerate()
            .for_each(|(chunk, out)| {
                let mut scratch = vec![0.0; c];
                for (i, label) in out.iter_mut().enumerate() {
                    *label = decide(chunk * CHUNK + i, &mut scratch);
                }
            });
        LabelMask::new(first.dims(), c, labels).expect("fused labels are below num_classes")
    }

    /// Fills `scores` with `Σ_k scale·w_k P_k(voxel, ·)` and returns the
    /// matching weight sum.
    fn weighted_scores(&self, voxel: usize, scale: f64, scores: &mut [f64]) -> f64 {
        scores.fill(0.0);
        let mut total = 0.0;
        for m in &self.maps {
            let p = m.voxel(voxel);
            let w = scale * p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for (s, &pc) in scores.iter_mut().zip(p) {
                *s += w * pc;
            }
            total += w;
        }
        total
    }

    fn confidence_with_scale(&self, scale: f64) -> LabelMask {
        self.build_mask(|voxel, scores| {
            self.weighted_scores(voxel, scale, scores);
            argmax_lowest(scores) as u8
        })
    }

    fn threshold_with_scale(&self, scale: f64) -> LabelMask {
        let tau = self.tau;
        self.build_mask(|voxel, scores| {
            let total = self.weighted_scores(voxel, scale, scores);
            for s in scores.iter_mut() {
                *s /= total;
            }
            let best = argmax_lowest(scores);
            if scores[best] >= tau {
                best as u8
            } else {
                0
            }
        })
    }
}

/// Each map votes for its argmax; most votes wins.
pub fn majority_vote(input: &FusionInput<'_>) -> LabelMask {
    input.build_mask(|voxel, votes| {
        votes.fill(0.0);
        for m in &input.maps {
            votes[argmax_lowest(m.voxel(voxel))] += 1.0;
        }
        argmax_lowest(votes) as u8
    })
}

pub fn confidence_weighted_vote(input: &FusionInput<'_>) -> LabelMask {
    input.confidence_with_scale(1.0)
}

pub fn threshold_weighted_vote(input: &FusionInput<'_>) -> LabelMask {
    input.threshold_with_scale(1.0)
}

/// Dispatches on the input's voting mode.
pub fn fuse(input: &FusionInput<'_>) -> LabelMask {
    match input.mode {
        VotingMode::Majority => majority_vote(input),
        VotingMode::ConfidenceWeighted => confidence_weighted_vote(input),
        VotingMode::ThresholdWeighted => threshold_weighted_vote(input),
    }
}

/// Foreground extent in mm³.
pub fn foreground_volume(mask: &LabelMask, spacing: Spacing) -> f64 {
    mask.foreground_count() as f64 * spacing.voxel_volume()
}
