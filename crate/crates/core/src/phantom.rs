//! Procedural phantoms with known labels for desk-scale experiments.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::nifti::{self, DataType, NiftiError};
use crate::rng::{SeededRng, StreamKey};
use crate::types::{Dims, LabelMask, Spacing, Volume};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub spacing: Spacing,
    pub num_classes: usize,
    /// Standard deviation of additive intensity noise.
    pub noise: f64,
}

impl PhantomSpec {
    pub fn cube(n: usize, num_classes: usize) -> Self {
        Self {
            dims: Dims::new(n, n, n).expect("n > 0"),
            spacing: Spacing::isotropic(),
            num_classes,
            noise: 5.0,
        }
    }
}

struct Ellipsoid {
    centre: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [usize; 3]) -> bool {
        (0..3)
            .map(|k| ((p[k] as f64 - self.centre[k]) / self.radii[k]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

/// Phantom `index` of a seeded family: a foreground ellipsoid (class 1)
/// with smaller ellipsoids for classes `2..C` nested inside it. Intensity is
/// `100 + 50·label` plus a gentle gradient and Gaussian noise.
pub fn phantom(seed: u64, index: usize, spec: &PhantomSpec) -> (Volume, LabelMask) {
    let mut rng = SeededRng::new(seed, StreamKey::augmentation(format!("phantom-{index}"), 0));
    let d = spec.dims;
    let n = d.0.map(|x| x as f64);
    let outer = Ellipsoid {
        centre: [0, 1, 2].map(|k| n[k] * rng.random_range(0.4..0.6)),
        radii: [0, 1, 2].map(|k| (n[k] * rng.random_range(0.18..0.3)).max(1.0)),
    };
    let mut shapes = vec![outer];
    for level in 2..spec.num_classes {
        let parent = &shapes[level - 2];
        let scale = 0.55;
        let radii = parent.radii.map(|r| (r * scale).max(0.75));
        let centre = [0, 1, 2].map(|k| {
            let slack = parent.radii[k] - radii[k];
            parent.centre[k] + slack * rng.random_range(-0.5..0.5)
        });
        shapes.push(Ellipsoid { centre, radii });
    }
    let labels: Vec<u8> = (0..d.len())
        .map(|i| {
            let p = d.coords(i);
            shapes
                .iter()
                .rposition(|s| s.contains(p))
                .map_or(0, |k| (k + 1) as u8)
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise level");
    let data = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let [x, _, _] = d.coords(i);
            100.0 + 50.0 * l as f64 + 10.0 * x as f64 / n[0] + noise.sample(&mut rng)
        })
        .collect();
    let id = format!("phantom_{index:03}");
    (
        Volume::new(id, d, spec.spacing, data).expect("phantom data is finite"),
        LabelMask::new(d, spec.num_classes, labels).expect("labels below num_classes"),
    )
}

/// Writes `count` phantoms as gzipped NIfTI plus a `manifest.json` with
/// paths relative to `dir`; returns the manifest path.
pub fn write_phantom_dataset(
    dir: impl AsRef<Path>,
    count: usize,
    spec: &PhantomSpec,
    seed: u64,
) -> Result<PathBuf, NiftiError> {
    let dir = dir.as_ref();
    let io = |path: &Path, source| NiftiError::IoFailure {
        path: path.to_path_buf(),
        source,
    };
    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let (v, gt) = phantom(seed, i, spec);
        let image = format!("images/{}.nii.gz", v.id());
        let label = format!("labels/{}.nii.gz", v.id());
        nifti::write_volume(&v, DataType::Float32, dir.join(&image))?;
        nifti::write_label_mask(&gt, spec.spacing, dir.join(&label))?;
        entries.push(serde_json::json!({
            "id": v.id(),
            "image": image,
            "label": label,
            "classes": spec.num_classes,
        }));
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&serde_json::json!({
        "name": "phantoms",
        "entries": entries,
    }))
    .expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| io(&path, e))?;
    Ok(path)
}
