//! Exact squared Euclidean distance transform on an anisotropic grid.
//!
//! Separable lower-envelope-of-parabolas method: one 1D pass per axis, each
//! linear in the line length.

use crate::types::Dims;

/// Squared distance in mm² from every voxel to the nearest `true` voxel of
/// `features`. All entries are `f64::INFINITY` when `features` is empty.
pub fn squared_distance_transform(features: &[bool], dims: Dims, spacing: [f64; 3]) -> Vec<f64> {
    let mut d: Vec<f64> = features
        .iter()
        .map(|&f| if f { 0.0 } else { f64::INFINITY })
        .collect();
    let longest = *dims.0.iter().max().unwrap_or(&1);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut env = Envelope::with_capacity(longest);
    for (axis, &step) in spacing.iter().enumerate() {
        let n = dims.0[axis];
        let stride = dims.stride(axis);
        for start in 0..d.len() {
            if !(start / stride).is_multiple_of(n) {
                continue;
            }
            for i in 0..n {
                line[i] = d[start + i * stride];
            }
            env.transform(&line[..n], step, &mut out[..n]);
            for i in 0..n {
                d[start + i * stride] = out[i];
            }
        }
    }
    d
}

struct Envelope {
    /// Grid indices of the parabolas in the lower envelope.
    sites: Vec<usize>,
    /// Left boundaries (in mm) of each parabola's interval.
    bounds: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Self {
            sites: Vec::with_capacity(n),
            bounds: Vec::with_capacity(n + 1),
        }
    }

    /// `out[q] = min_p (s·(q − p))² + f[p]`.
    fn transform(&mut self, f: &[f64], s: f64, out: &mut [f64]) {
        self.sites.clear();
        self.bounds.clear();
        let pos = |i: usize| i as f64 * s;
        for (q, &fq) in f.iter().enumerate() {
            if fq == f64::INFINITY {
                continue;
            }
            let aq = pos(q);
            loop {
                let Some(&v) = self.sites.last() else {
                    self.sites.push(q);
                    self.bounds.push(f64::NEG_INFINITY);
                    break;
                };
                let av = pos(v);
                let x = ((fq + aq * aq) - (f[v] + av * av)) / (2.0 * (aq - av));
                if x <= *self.bounds.last().expect("bounds track sites") {
                    self.sites.pop();
                    self.bounds.pop();
                } else {
                    self.sites.push(q);
                    self.bounds.push(x);
                    break;
                }
            }
        }
        if self.sites.is_empty() {
            out.fill(f64::INFINITY);
            return;
        }
        let mut k = 0;
        for (q, slot) in out.iter_mut().enumerate() {
            let aq = pos(q);
            while k + 1 < self.sites.len() && self.bounds[k + 1] < aq {
                k += 1;
            }
            let v = self.sites[k];
            let diff = aq - pos(v);
            *slot = diff * diff + f[v];
        }
    }
}
