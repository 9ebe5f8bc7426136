//! Overlap and boundary metrics between a predicted and a reference mask.
//!
//! Overlap is reported per foreground class (IoU, Dice and their unweighted
//! means) and class-agnostically after merging every foreground class. The
//! boundary metric is the 95th percentile of the pooled symmetric
//! surface-to-surface distances on the agnostic foreground, in millimeters.

mod edt;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use edt::squared_distance_transform;

use crate::types::{Dims, LabelMask, Spacing};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("mask dims differ: {pred:?} vs {gt:?}")]
    DimsMismatch { pred: [usize; 3], gt: [usize; 3] },
    #[error("masks disagree on class count: {pred} vs {gt}")]
    ClassCountMismatch { pred: usize, gt: usize },
}

fn check_compatible(pred: &LabelMask, gt: &LabelMask) -> Result<(), MetricsError> {
    if pred.dims() != gt.dims() {
        return Err(MetricsError::DimsMismatch {
            pred: pred.dims().0,
            gt: gt.dims().0,
        });
    }
    if pred.num_classes() != gt.num_classes() {
        return Err(MetricsError::ClassCountMismatch {
            pred: pred.num_classes(),
            gt: gt.num_classes(),
        });
    }
    Ok(())
}

/// Region-overlap part of a [`MetricReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapMetrics {
    /// Foreground classes present in either mask.
    pub per_class_iou: BTreeMap<u8, f64>,
    pub per_class_dice: BTreeMap<u8, f64>,
    pub miou: f64,
    pub mdice: f64,
    pub aiou: f64,
    pub adice: f64,
}

/// Full metric set for one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub overlap: OverlapMetrics,
    /// `None` when exactly one of the two foregrounds is empty.
    pub hd95_mm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub undefined_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Hd95 {
    Defined(f64),
    Undefined(String),
}

impl Hd95 {
    pub fn value(&self) -> Option<f64> {
        match self {
            Self::Defined(v) => Some(*v),
            Self::Undefined(_) => None,
        }
    }
}

fn ratio_or_one(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

/// Per-class and agnostic IoU/Dice.
///
/// Classes absent from both masks are left out of the means. If nothing is
/// left (both masks all background) the means are 1, matching the agnostic
/// scores of two empty foregrounds.
pub fn overlap_metrics(pred: &LabelMask, gt: &LabelMask) -> Result<OverlapMetrics, MetricsError> {
    check_compatible(pred, gt)?;
    let c = pred.num_classes();
    let mut inter = vec![0u64; c];
    let mut pred_count = vec![0u64; c];
    let mut gt_count = vec![0u64; c];
    let (mut a_inter, mut a_pred, mut a_gt) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        pred_count[p as usize] += 1;
        gt_count[g as usize] += 1;
        if p == g {
            inter[p as usize] += 1;
        }
        let (pf, gf) = (p != 0, g != 0);
        a_pred += pf as u64;
        a_gt += gf as u64;
        a_inter += (pf && gf) as u64;
    }

    let mut per_class_iou = BTreeMap::new();
    let mut per_class_dice = BTreeMap::new();
    for class in 1..c {
        let (i, p, g) = (inter[class], pred_count[class], gt_count[class]);
        let union = p + g - i;
        if union == 0 {
            continue;
        }
        per_class_iou.insert(class as u8, i as f64 / union as f64);
        per_class_dice.insert(class as u8, 2.0 * i as f64 / (p + g) as f64);
    }
    let mean = |m: &BTreeMap<u8, f64>| {
        if m.is_empty() {
            1.0
        } else {
            m.values().sum::<f64>() / m.len() as f64
        }
    };
    let a_union = a_pred + a_gt - a_inter;
    Ok(OverlapMetrics {
        miou: mean(&per_class_iou),
        mdice: mean(&per_class_dice),
        per_class_iou,
        per_class_dice,
        aiou: ratio_or_one(a_inter as f64, a_union as f64),
        adice: ratio_or_one(2.0 * a_inter as f64, (a_pred + a_gt) as f64),
    })
}

/// Marks voxels of `set` having a face neighbour outside it; voxels on the
/// grid border treat out-of-bounds neighbours as outside.
pub fn surface_mask(set: &[bool], dims: Dims) -> Vec<bool> {
    let [nx, ny, nz] = dims.0;
    let mut out = vec![false; set.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = dims.index(x, y, z);
                if !set[i] {
                    continue;
                }
                let interior = x > 0
                    && x + 1 < nx
                    && y > 0
                    && y + 1 < ny
                    && z > 0
                    && z + 1 < nz
                    && set[i - 1]
                    && set[i + 1]
                    && set[i - nx]
                    && set[i + nx]
                    && set[i - nx * ny]
                    && set[i + nx * ny];
                out[i] = !interior;
            }
        }
    }
    out
}

/// Boundary voxels of the union of `classes`, in canonical order.
pub fn surface_voxels(mask: &LabelMask, classes: &[u8]) -> Vec<[usize; 3]> {
    let set: Vec<bool> = mask.labels().iter().map(|l| classes.contains(l)).collect();
    let dims = mask.dims();
    surface_mask(&set, dims)
        .iter()
        .enumerate()
        .filter(|(_, &s)| s)
        .map(|(i, _)| dims.coords(i))
        .collect()
}

/// Every foreground class of a mask.
pub fn foreground_classes(mask: &LabelMask) -> Vec<u8> {
    (1..mask.num_classes()).map(|c| c as u8).collect()
}

/// Inclusive linear-interpolation percentile of sorted values, `q` in [0, 1].
pub fn percentile_linear(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty sample");
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// 95th-percentile Hausdorff distance between the agnostic foreground
/// surfaces, via exact distance transforms.
pub fn hd95(pred: &LabelMask, gt: &LabelMask, spacing: Spacing) -> Result<Hd95, MetricsError> {
    if pred.dims() != gt.dims() {
        return Err(MetricsError::DimsMismatch {
            pred: pred.dims().0,
            gt: gt.dims().0,
        });
    }
    let dims = pred.dims();
    let fg = |m: &LabelMask| m.labels().iter().map(|&l| l != 0).collect::<Vec<bool>>();
    let pred_surface = surface_mask(&fg(pred), dims);
    let gt_surface = surface_mask(&fg(gt), dims);
    let pred_empty = !pred_surface.contains(&true);
    let gt_empty = !gt_surface.contains(&true);
    match (pred_empty, gt_empty) {
        (true, true) => return Ok(Hd95::Defined(0.0)),
        (true, false) => {
            return Ok(Hd95::Undefined(
                "prediction has no foreground while reference does".into(),
            ))
        }
        (false, true) => {
            return Ok(Hd95::Undefined(
                "reference has no foreground while prediction does".into(),
            ))
        }
        (false, false) => {}
    }
    let s = spacing.as_array();
    let to_gt = squared_distance_transform(&gt_surface, dims, s);
    let to_pred = squared_distance_transform(&pred_surface, dims, s);
    let mut pooled: Vec<f64> = pred_surface
        .iter()
        .zip(&to_gt)
        .filter(|(&on, _)| on)
        .map(|(_, d)| d.sqrt())
        .chain(
            gt_surface
                .iter()
                .zip(&to_pred)
                .filter(|(&on, _)| on)
                .map(|(_, d)| d.sqrt()),
        )
        .collect();
    pooled.sort_by(f64::total_cmp);
    Ok(Hd95::Defined(percentile_linear(&pooled, 0.95)))
}

/// Overlap plus HD95 for one case.
pub fn evaluate(pred: &LabelMask, gt: &LabelMask, spacing: Spacing) -> Result<MetricReport, MetricsError> {
    let overlap = overlap_metrics(pred, gt)?;
    let (hd95_mm, undefined_reason) = match hd95(pred, gt, spacing)? {
        Hd95::Defined(v) => (Some(v), None),
        Hd95::Undefined(reason) => (None, Some(reason)),
    };
    Ok(MetricReport {
        overlap,
        hd95_mm,
        undefined_reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(dims: [usize; 3], c: usize, fg: &[([usize; 3], u8)]) -> LabelMask {
        let d = Dims::new(dims[0], dims[1], dims[2]).unwrap();
        let mut labels = vec![0u8; d.len()];
        for &([x, y, z], l) in fg {
            labels[d.index(x, y, z)] = l;
        }
        LabelMask::new(d, c, labels).unwrap()
    }

    #[test]
    fn identical_masks_score_perfectly() {
        let m = mask([4, 4, 1], 3, &[([1, 1, 0], 1), ([2, 2, 0], 2), ([2, 1, 0], 2)]);
        let r = evaluate(&m, &m, Spacing::isotropic()).unwrap();
        assert_eq!(r.overlap.miou, 1.0);
        assert_eq!(r.overlap.mdice, 1.0);
        assert_eq!(r.overlap.aiou, 1.0);
        assert_eq!(r.overlap.adice, 1.0);
        assert_eq!(r.hd95_mm, Some(0.0));
    }

    #[test]
    fn disjoint_masks_score_zero() {
        let a = mask([4, 1, 1], 2, &[([0, 0, 0], 1)]);
        let b = mask([4, 1, 1], 2, &[([3, 0, 0], 1)]);
        let r = overlap_metrics(&a, &b).unwrap();
        assert_eq!((r.miou, r.mdice, r.aiou, r.adice), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn overlapping_squares() {
        // 2x2 squares shifted by one column share 2 voxels.
        let sq = |x0: usize| {
            let fg: Vec<_> = [(x0, 0), (x0 + 1, 0), (x0, 1), (x0 + 1, 1)]
                .iter()
                .map(|&(x, y)| ([x, y, 0], 1u8))
                .collect();
            mask([4, 2, 1], 2, &fg)
        };
        let r = overlap_metrics(&sq(0), &sq(1)).unwrap();
        assert!((r.per_class_iou[&1] - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(r.per_class_dice[&1], 0.5);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let a = mask([3, 1, 1], 3, &[([0, 0, 0], 1)]);
        let r = overlap_metrics(&a, &a).unwrap();
        assert_eq!(r.per_class_iou.len(), 1);
        assert_eq!(r.miou, 1.0);
        let b = mask([3, 1, 1], 3, &[([0, 0, 0], 1), ([2, 0, 0], 2)]);
        let r = overlap_metrics(&a, &b).unwrap();
        assert_eq!(r.per_class_iou[&2], 0.0);
        assert_eq!(r.miou, 0.5);
        let empty = mask([3, 1, 1], 3, &[]);
        let r = overlap_metrics(&empty, &empty).unwrap();
        assert!(r.per_class_iou.is_empty());
        assert_eq!((r.miou, r.aiou), (1.0, 1.0));
    }

    #[test]
    fn agnostic_merges_classes() {
        let a = mask([2, 1, 1], 3, &[([0, 0, 0], 1), ([1, 0, 0], 2)]);
        let b = mask([2, 1, 1], 3, &[([0, 0, 0], 2), ([1, 0, 0], 1)]);
        let r = overlap_metrics(&a, &b).unwrap();
        assert_eq!(r.miou, 0.0);
        assert_eq!(r.aiou, 1.0);
    }

    #[test]
    fn mismatched_masks() {
        let a = mask([2, 1, 1], 2, &[]);
        let b = mask([3, 1, 1], 2, &[]);
        assert!(matches!(overlap_metrics(&a, &b), Err(MetricsError::DimsMismatch { .. })));
        assert!(matches!(
            hd95(&a, &b, Spacing::isotropic()),
            Err(MetricsError::DimsMismatch { .. })
        ));
        let c = mask([2, 1, 1], 3, &[]);
        assert!(matches!(
            overlap_metrics(&a, &c),
            Err(MetricsError::ClassCountMismatch { .. })
        ));
    }

    #[test]
    fn surface_examples() {
        let single = mask([3, 3, 3], 2, &[([1, 1, 1], 1)]);
        assert_eq!(surface_voxels(&single, &[1]), vec![[1, 1, 1]]);

        let mut cube = vec![];
        for z in 1..4 {
            for y in 1..4 {
                for x in 1..4 {
                    cube.push(([x, y, z], 1u8));
                }
            }
        }
        let m = mask([5, 5, 5], 2, &cube);
        let s = surface_voxels(&m, &[1]);
        assert_eq!(s.len(), 26);
        assert!(!s.contains(&[2, 2, 2]));

        assert!(surface_voxels(&mask([3, 3, 3], 2, &[]), &[1]).is_empty());

        // A full grid: only the border shell is surface.
        let full = LabelMask::new(Dims::new(3, 3, 3).unwrap(), 2, vec![1; 27]).unwrap();
        assert_eq!(surface_voxels(&full, &[1]).len(), 26);
    }

    #[test]
    fn hd95_single_voxels() {
        let a = mask([5, 1, 1], 2, &[([0, 0, 0], 1)]);
        let b = mask([5, 1, 1], 2, &[([3, 0, 0], 1)]);
        let s = Spacing::new(2.0, 1.0, 1.0).unwrap();
        assert_eq!(hd95(&a, &b, s).unwrap(), Hd95::Defined(6.0));
    }

    #[test]
    fn hd95_empty_cases() {
        let a = mask([3, 1, 1], 2, &[([0, 0, 0], 1)]);
        let e = mask([3, 1, 1], 2, &[]);
        assert_eq!(hd95(&e, &e, Spacing::isotropic()).unwrap(), Hd95::Defined(0.0));
        assert!(matches!(hd95(&a, &e, Spacing::isotropic()).unwrap(), Hd95::Undefined(_)));
        let r = evaluate(&e, &a, Spacing::isotropic()).unwrap();
        assert_eq!(r.hd95_mm, None);
        assert!(r.undefined_reason.is_some());
    }

    #[test]
    fn percentile_interpolates() {
        let v: Vec<f64> = (0..=20).map(|i| i as f64).collect();
        assert_eq!(percentile_linear(&v, 0.95), 19.0);
        assert!((percentile_linear(&[1.0, 3.0], 0.95) - 2.9).abs() < 1e-15);
        assert_eq!(percentile_linear(&[4.0], 0.95), 4.0);
    }

    #[test]
    fn report_json_shape() {
        let a = mask([2, 1, 1], 2, &[([0, 0, 0], 1)]);
        let r = evaluate(&a, &a, Spacing::isotropic()).unwrap();
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["overlap"]["miou"], 1.0);
        assert_eq!(json["hd95_mm"], 0.0);
        assert!(json.get("undefined_reason").is_none());
        let back: MetricReport = serde_json::from_value(json).unwrap();
        assert_eq!(back, r);
    }
}
