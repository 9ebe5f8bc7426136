use proptest::prelude::*;

use segtta_core::augment::{gamma_correction, gaussian_blur};
use segtta_core::fusion::{self, FusionInput, VotingMode};
use segtta_core::metrics::hd95;
use segtta_core::{normalize_intensity, Dims, LabelMask, ProbabilityMap, Spacing, Volume};

fn volume(dims: [usize; 3], data: Vec<f64>) -> Volume {
    let d = Dims::new(dims[0], dims[1], dims[2]).unwrap();
    Volume::new("p", d, Spacing::isotropic(), data).unwrap()
}

fn volume_strategy(lo: f64, hi: f64) -> impl Strategy<Value = Volume> {
    (1usize..6, 1usize..6, 1usize..5).prop_flat_map(move |(x, y, z)| {
        prop::collection::vec(lo..hi, x * y * z).prop_map(move |data| volume([x, y, z], data))
    })
}

fn total_variation(v: &Volume) -> f64 {
    let d = v.dims();
    let mut tv = 0.0;
    for axis in 0..3 {
        let stride = d.stride(axis);
        for i in 0..d.len() {
            let c = d.coords(i);
            if c[axis] + 1 < d.0[axis] {
                tv += (v.data()[i + stride] - v.data()[i]).abs();
            }
        }
    }
    tv
}

fn blob(dims: Dims, lo: [usize; 3], size: [usize; 3]) -> LabelMask {
    let labels = (0..dims.len())
        .map(|i| {
            let c = dims.coords(i);
            (0..3).all(|k| c[k] >= lo[k] && c[k] < lo[k] + size[k]) as u8
        })
        .collect();
    LabelMask::new(dims, 2, labels).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 128,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn normalize_then_invert_recovers_input(v in volume_strategy(-1e3, 1e3)) {
        let (n, range) = normalize_intensity(&v);
        for &x in n.data() {
            prop_assert!((0.0..=1.0).contains(&x));
        }
        let back = range.invert(&n);
        let (lo, hi) = v.min_max();
        let tol = 1e-9 * (hi - lo).max(1.0);
        for (a, b) in v.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= tol, "{a} vs {b}");
        }
    }

    #[test]
    fn blur_does_not_increase_total_variation(
        v in volume_strategy(0.0, 1.0),
        sigma in 0.3f64..3.0,
        axis in prop::option::of(0usize..3),
    ) {
        let before = total_variation(&v);
        let after = total_variation(&gaussian_blur(&v, sigma, axis).unwrap());
        prop_assert!(after <= before + 1e-9 * (1.0 + before), "{after} > {before}");
    }

    #[test]
    fn gamma_preserves_order(v in volume_strategy(0.0, 500.0), gamma in 0.2f64..5.0) {
        let out = gamma_correction(&v, gamma).unwrap();
        let mut pairs: Vec<(f64, f64)> = v.data().iter().copied().zip(out.data().iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in pairs.windows(2) {
            prop_assert!(w[0].1 <= w[1].1);
        }
    }

    #[test]
    fn fusion_ignores_map_order(
        seed_probs in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 3 * 27), 1..5),
        rotation in 0usize..4,
        tau in 0.05f64..1.0,
    ) {
        let dims = Dims::new(3, 3, 3).unwrap();
        let maps: Vec<ProbabilityMap> = seed_probs
            .into_iter()
            .enumerate()
            .map(|(i, mut p)| {
                for voxel in p.chunks_mut(3) {
                    let sum: f64 = voxel.iter().sum();
                    voxel.iter_mut().for_each(|x| *x /= sum);
                }
                ProbabilityMap::new(dims, 3, p, format!("m{i}")).unwrap()
            })
            .collect();
        let mut shuffled = maps.clone();
        let k = rotation % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        for mode in [VotingMode::Majority, VotingMode::ConfidenceWeighted, VotingMode::ThresholdWeighted] {
            let a = fusion::fuse(&FusionInput::new(maps.iter(), mode, tau).unwrap());
            let b = fusion::fuse(&FusionInput::new(shuffled.iter(), mode, tau).unwrap());
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn hd95_is_symmetric_and_translation_invariant(
        a_lo in prop::array::uniform3(1usize..5),
        a_size in prop::array::uniform3(1usize..5),
        b_lo in prop::array::uniform3(1usize..5),
        b_size in prop::array::uniform3(1usize..5),
        shift in prop::array::uniform3(0usize..3),
    ) {
        let dims = Dims::new(14, 14, 14).unwrap();
        let spacing = Spacing::new(0.5, 1.0, 2.0).unwrap();
        let a = blob(dims, a_lo, a_size);
        let b = blob(dims, b_lo, b_size);
        let ab = hd95(&a, &b, spacing).unwrap().value().unwrap();
        let ba = hd95(&b, &a, spacing).unwrap().value().unwrap();
        prop_assert_eq!(ab, ba);
        let moved = |lo: [usize; 3]| [0, 1, 2].map(|k| lo[k] + shift[k]);
        let a2 = blob(dims, moved(a_lo), a_size);
        let b2 = blob(dims, moved(b_lo), b_size);
        let shifted = hd95(&a2, &b2, spacing).unwrap().value().unwrap();
        prop_assert!((shifted - ab).abs() <= 1e-12, "{shifted} vs {ab}");
    }
}
