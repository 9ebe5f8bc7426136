//! Segmentation backends: anything that maps a volume to a probability map.
//!
//! Synthetic backends derive their output from a ground-truth mask and are
//! used for testing and for controlled ensemble experiments. The external
//! backend runs a command that exchanges NIfTI files with the pipeline:
//!
//! * `{input}` is replaced with the path of a float32 3D volume;
//! * `{output}` with the path where a 4D float32 map with `dim[4] = C`
//!   must be written;
//! * `{classes}` with `C`.
//!
//! The command runs under `sh -c`, must exit with status 0 before the
//! timeout, and its stdout/stderr are copied into the run log.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::nifti::{self, DataType, NiftiError};
use crate::rng::SeededRng;
use crate::runlog::RunLog;
use crate::types::{Dims, LabelMask, ProbabilityMap, Volume};

/// Environment variable naming the directory used for external-backend
/// file exchange.
pub const TMPDIR_ENV: &str = "SEGTTA_TMPDIR";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid backend descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("backend needs a ground-truth mask and none is available")]
    GroundTruthMissing,
    #[error("dims mismatch: volume {volume:?}, backend data {other:?}")]
    DimsMismatch { volume: [usize; 3], other: [usize; 3] },
    #[error("external process failed: {0}")]
    ProcessFailure(String),
    #[error("backend output is not a probability map: voxel {voxel} sums to {sum}")]
    NotProbabilistic { voxel: usize, sum: f64 },
    #[error(transparent)]
    Nifti(#[from] NiftiError),
}

fn one() -> f64 {
    1.0
}

fn default_noisy_confidence() -> f64 {
    0.9
}

fn default_timeout() -> f64 {
    600.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendDescriptor {
    /// Softened one-hot of the ground truth: the true class gets
    /// `confidence`, the rest share `1 - confidence` equally.
    Oracle {
        /// Mask file to use instead of the case's reference labels.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ground_truth: Option<PathBuf>,
        #[serde(default = "one")]
        confidence: f64,
    },
    /// Oracle with boundary jitter (dilate or erode by `jitter` voxels,
    /// direction drawn per prediction) and i.i.d. label flips.
    NoisyOracle {
        #[serde(default)]
        jitter: u32,
        #[serde(default)]
        flip: f64,
        #[serde(default = "default_noisy_confidence")]
        confidence: f64,
    },
    Constant {
        class: u8,
        #[serde(default = "one")]
        confidence: f64,
    },
    ExternalProcess {
        command: String,
        #[serde(default = "default_timeout")]
        timeout_secs: f64,
    },
}

impl BackendDescriptor {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::Oracle { .. } => "oracle",
            Self::NoisyOracle { .. } => "noisy_oracle",
            Self::Constant { .. } => "constant",
            Self::ExternalProcess { .. } => "external_process",
        }
    }

    pub fn is_external(&self) -> bool {
        matches!(self, Self::ExternalProcess { .. })
    }

    pub fn validate(&self, num_classes: usize) -> Result<(), BackendError> {
        let check_confidence = |q: f64| {
            let floor = 1.0 / num_classes as f64;
            if q.is_finite() && q > floor && q <= 1.0 {
                Ok(())
            } else {
                Err(BackendError::InvalidDescriptor(format!(
                    "confidence {q} must lie in (1/{num_classes}, 1]"
                )))
            }
        };
        match self {
            Self::Oracle { confidence, .. } => check_confidence(*confidence),
            Self::NoisyOracle {
                flip, confidence, ..
            } => {
                if !(flip.is_finite() && (0.0..=1.0).contains(flip)) {
                    return Err(BackendError::InvalidDescriptor(format!(
                        "flip probability {flip} must lie in [0, 1]"
                    )));
                }
                check_confidence(*confidence)
            }
            Self::Constant { class, confidence } => {
                if *class as usize >= num_classes {
                    return Err(BackendError::InvalidDescriptor(format!(
                        "constant class {class} is not below {num_classes}"
                    )));
                }
                check_confidence(*confidence)
            }
            Self::ExternalProcess {
                command,
                timeout_secs,
            } => {
                if command.trim().is_empty() {
                    return Err(BackendError::InvalidDescriptor("empty command".into()));
                }
                if !(timeout_secs.is_finite() && *timeout_secs > 0.0) {
                    return Err(BackendError::InvalidDescriptor(format!(
                        "timeout {timeout_secs} must be positive"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Everything a prediction needs besides the descriptor and the volume.
#[derive(Debug)]
pub struct PredictRequest<'a> {
    pub num_classes: usize,
    pub ground_truth: Option<&'a LabelMask>,
    pub source_tag: String,
    /// Directory for external file exchange; falls back to
    /// `$SEGTTA_TMPDIR`, then the system temp dir.
    pub exchange_dir: Option<&'a Path>,
    pub log: Option<&'a RunLog>,
}

impl<'a> PredictRequest<'a> {
    pub fn new(num_classes: usize, source_tag: impl Into<String>) -> Self {
        Self {
            num_classes,
            ground_truth: None,
            source_tag: source_tag.into(),
            exchange_dir: None,
            log: None,
        }
    }

    pub fn with_ground_truth(mut self, gt: &'a LabelMask) -> Self {
        self.ground_truth = Some(gt);
        self
    }

    pub fn with_log(mut self, log: &'a RunLog) -> Self {
        self.log = Some(log);
        self
    }
}

fn dims_mismatch(volume: Dims, other: Dims) -> BackendError {
    BackendError::DimsMismatch {
        volume: volume.0,
        other: other.0,
    }
}

impl From<crate::types::TypeError> for BackendError {
    fn from(e: crate::types::TypeError) -> Self {
        match e {
            crate::types::TypeError::NotProbabilistic { voxel, sum } => {
                Self::NotProbabilistic { voxel, sum }
            }
            other => Self::InvalidDescriptor(other.to_string()),
        }
    }
}

/// Runs one backend on one volume.
pub fn predict(
    backend: &BackendDescriptor,
    v: &Volume,
    req: &PredictRequest<'_>,
    rng: &mut SeededRng,
) -> Result<ProbabilityMap, BackendError> {
    backend.validate(req.num_classes)?;
    let c = req.num_classes;
    let map = match backend {
        BackendDescriptor::Oracle {
            ground_truth,
            confidence,
        } => {
            let loaded;
            let gt = match ground_truth {
                Some(path) => {
                    loaded = nifti::read_label_mask(path, c)?;
                    &loaded
                }
                None => req.ground_truth.ok_or(BackendError::GroundTruthMissing)?,
            };
            check_gt(gt, v, c)?;
            ProbabilityMap::softened(gt, *confidence, req.source_tag.clone())
        }
        BackendDescriptor::NoisyOracle {
            jitter,
            flip,
            confidence,
        } => {
            let gt = req.ground_truth.ok_or(BackendError::GroundTruthMissing)?;
            check_gt(gt, v, c)?;
            let noisy = corrupt_labels(gt, *jitter, *flip, rng);
            ProbabilityMap::softened(&noisy, *confidence, req.source_tag.clone())
        }
        BackendDescriptor::Constant { class, confidence } => {
            let mask = LabelMask::new(v.dims(), c, vec![*class; v.dims().len()])?;
            ProbabilityMap::softened(&mask, *confidence, req.source_tag.clone())
        }
        BackendDescriptor::ExternalProcess {
            command,
            timeout_secs,
        } => run_external(command, *timeout_secs, v, req)?,
    };
    if map.dims() != v.dims() {
        return Err(dims_mismatch(v.dims(), map.dims()));
    }
    Ok(map)
}

fn check_gt(gt: &LabelMask, v: &Volume, c: usize) -> Result<(), BackendError> {
    if gt.dims() != v.dims() {
        return Err(dims_mismatch(v.dims(), gt.dims()));
    }
    if gt.num_classes() != c {
        return Err(BackendError::InvalidDescriptor(format!(
            "ground truth has {} classes, run uses {c}",
            gt.num_classes()
        )));
    }
    Ok(())
}

/// Boundary jitter followed by i.i.d. flips to a uniformly chosen other
/// class. Draw order: jitter direction, then one or two draws per voxel.
pub fn corrupt_labels(gt: &LabelMask, jitter: u32, flip: f64, rng: &mut SeededRng) -> LabelMask {
    let dilate: bool = rng.random();
    let mut labels = gt.labels().to_vec();
    for _ in 0..jitter {
        labels = if dilate {
            dilate_step(&labels, gt.dims())
        } else {
            erode_step(&labels, gt.dims())
        };
    }
    let c = gt.num_classes();
    if flip > 0.0 {
        for l in labels.iter_mut() {
            let u: f64 = rng.random();
            if u < flip {
                let k = rng.random_range(0..c - 1) as u8;
                *l = if k >= *l { k + 1 } else { k };
            }
        }
    }
    LabelMask::new(gt.dims(), c, labels).expect("flips stay below num_classes")
}

fn face_neighbours(dims: Dims, i: usize) -> impl Iterator<Item = usize> {
    let [x, y, z] = dims.coords(i);
    let [nx, ny, nz] = dims.0;
    let candidates = [
        (x > 0).then(|| i - 1),
        (x + 1 < nx).then(|| i + 1),
        (y > 0).then(|| i - nx),
        (y + 1 < ny).then(|| i + nx),
        (z > 0).then(|| i - nx * ny),
        (z + 1 < nz).then(|| i + nx * ny),
    ];
    candidates.into_iter().flatten()
}

/// Background voxels touching foreground take the lowest neighbouring
/// foreground label.
fn dilate_step(labels: &[u8], dims: Dims) -> Vec<u8> {
    let mut out = labels.to_vec();
    for (i, slot) in out.iter_mut().enumerate() {
        if labels[i] != 0 {
            continue;
        }
        if let Some(l) = face_neighbours(dims, i)
            .map(|j| labels[j])
            .filter(|&l| l != 0)
            .min()
        {
            *slot = l;
        }
    }
    out
}

/// Foreground voxels touching background become background.
fn erode_step(labels: &[u8], dims: Dims) -> Vec<u8> {
    let mut out = labels.to_vec();
    for (i, slot) in out.iter_mut().enumerate() {
        if labels[i] != 0 && face_neighbours(dims, i).any(|j| labels[j] == 0) {
            *slot = 0;
        }
    }
    out
}

fn exchange_root(req: &PredictRequest<'_>) -> PathBuf {
    req.exchange_dir
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(TMPDIR_ENV).map(PathBuf::from))
        .unwrap_or_else(std::env::temp_dir)
}

fn run_external(
    template: &str,
    timeout_secs: f64,
    v: &Volume,
    req: &PredictRequest<'_>,
) -> Result<ProbabilityMap, BackendError> {
    let root = exchange_root(req);
    std::fs::create_dir_all(&root)
        .map_err(|e| BackendError::ProcessFailure(format!("exchange dir {}: {e}", root.display())))?;
    let dir = tempfile::Builder::new()
        .prefix("segtta-")
        .tempdir_in(&root)
        .map_err(|e| BackendError::ProcessFailure(format!("exchange dir {}: {e}", root.display())))?;
    let input = dir.path().join("input.nii");
    let output = dir.path().join("output.nii");
    nifti::write_volume(v, DataType::Float32, &input)?;

    let command = template
        .replace("{input}", &input.to_string_lossy())
        .replace("{output}", &output.to_string_lossy())
        .replace("{classes}", &req.num_classes.to_string());
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(&command)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| BackendError::ProcessFailure(format!("spawn `{command}`: {e}")))?;

    let drain = |mut pipe: Box<dyn Read + Send>| {
        thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = pipe.read_to_end(&mut buf);
            String::from_utf8_lossy(&buf).into_owned()
        })
    };
    let stdout = drain(Box::new(child.stdout.take().expect("stdout is piped")));
    let stderr = drain(Box::new(child.stderr.take().expect("stderr is piped")));

    let deadline = Instant::now() + Duration::from_secs_f64(timeout_secs);
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break Some(status),
            Ok(None) if Instant::now() >= deadline => {
                let _ = child.kill();
                let _ = child.wait();
                break None;
            }
            Ok(None) => thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                let _ = child.kill();
                return Err(BackendError::ProcessFailure(format!("wait: {e}")));
            }
        }
    };
    let stdout = stdout.join().unwrap_or_default();
    let stderr = stderr.join().unwrap_or_default();
    if let Some(log) = req.log {
        log.event(
            "backend_process",
            json!({
                "source_tag": req.source_tag,
                "command": command,
                "exit_code": status.and_then(|s| s.code()),
                "timed_out": status.is_none(),
                "stdout": stdout,
                "stderr": stderr,
            }),
        );
    }
    let status = status.ok_or_else(|| {
        BackendError::ProcessFailure(format!("timed out after {timeout_secs} s: `{command}`"))
    })?;
    if !status.success() {
        return Err(BackendError::ProcessFailure(format!(
            "`{command}` exited with {status}"
        )));
    }
    if !output.exists() {
        return Err(BackendError::ProcessFailure(format!(
            "`{command}` produced no output file"
        )));
    }
    let map = match nifti::read_probability_map(&output) {
        Ok(m) => m,
        Err(NiftiError::NotProbabilistic { voxel, sum }) => {
            return Err(BackendError::NotProbabilistic { voxel, sum })
        }
        Err(e) => return Err(BackendError::ProcessFailure(format!("malformed output: {e}"))),
    };
    if map.num_classes() != req.num_classes {
        return Err(BackendError::ProcessFailure(format!(
            "output has {} classes, expected {}",
            map.num_classes(),
            req.num_classes
        )));
    }
    if map.dims() != v.dims() {
        return Err(dims_mismatch(v.dims(), map.dims()));
    }
    Ok(map.with_source_tag(req.source_tag.clone()))
}
