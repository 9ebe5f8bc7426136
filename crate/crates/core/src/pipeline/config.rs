use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::backend::BackendDescriptor;
use crate::fusion::{validate_tau, VotingMode, DEFAULT_TAU};
use crate::types::AugmentationSpec;

pub const DEFAULT_SEED: u64 = 2024;

fn default_augmentations() -> Vec<AugmentationSpec> {
    AugmentationSpec::default_set()
}

fn default_voting() -> VotingMode {
    VotingMode::ThresholdWeighted
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

fn yes() -> bool {
    true
}

fn default_external_jobs() -> usize {
    1
}

/// Restricts a run to selected (backend, view) pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSelector {
    /// Index into `backends`.
    pub backend: usize,
    /// Index into `augmentations`; `null` selects the original view.
    pub augmentation: Option<usize>,
}

/// Complete description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub backends: Vec<BackendDescriptor>,
    #[serde(default = "default_augmentations")]
    pub augmentations: Vec<AugmentationSpec>,
    #[serde(default = "default_voting")]
    pub voting: VotingMode,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Whether the original-view maps take part in the fused result.
    #[serde(default = "yes")]
    pub include_baseline: bool,
    /// Worker threads; `None` uses all available cores.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
    /// Maximum number of external backend processes running at once.
    #[serde(default = "default_external_jobs")]
    pub external_jobs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<Vec<PairSelector>>,
}

impl RunConfig {
    pub fn new(backends: Vec<BackendDescriptor>) -> Self {
        Self {
            backends,
            augmentations: default_augmentations(),
            voting: default_voting(),
            tau: DEFAULT_TAU,
            seed: DEFAULT_SEED,
            include_baseline: true,
            jobs: None,
            external_jobs: 1,
            output_dir: None,
            subset: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            PipelineError::Config(msg) => PipelineError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Checks everything that does not depend on the dataset.
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.backends.is_empty() {
            return Err(PipelineError::Config("at least one backend is required".into()));
        }
        validate_tau(self.tau)?;
        for (i, spec) in self.augmentations.iter().enumerate() {
            spec.validate()
                .map_err(|e| PipelineError::Config(format!("augmentation {i}: {e}")))?;
        }
        if self.jobs == Some(0) {
            return Err(PipelineError::Config("jobs must be at least 1".into()));
        }
        if self.external_jobs == 0 {
            return Err(PipelineError::Config("external_jobs must be at least 1".into()));
        }
        if let Some(subset) = &self.subset {
            if subset.is_empty() {
                return Err(PipelineError::Config("subset must not be empty".into()));
            }
            for s in subset {
                if s.backend >= self.backends.len() {
                    return Err(PipelineError::Config(format!(
                        "subset backend index {} out of range",
                        s.backend
                    )));
                }
                if s.augmentation.is_some_and(|a| a >= self.augmentations.len()) {
                    return Err(PipelineError::Config(format!(
                        "subset augmentation index {:?} out of range",
                        s.augmentation
                    )));
                }
            }
        }
        Ok(())
    }

    /// Checks the parts that depend on the class count.
    pub fn validate_for(&self, num_classes: usize) -> Result<(), PipelineError> {
        self.validate()?;
        for (i, b) in self.backends.iter().enumerate() {
            b.validate(num_classes)
                .map_err(|e| PipelineError::Config(format!("backend {i}: {e}")))?;
        }
        Ok(())
    }

    pub(crate) fn selected(&self, backend: usize, augmentation: Option<usize>) -> bool {
        match &self.subset {
            None => true,
            Some(s) => s.contains(&PairSelector {
                backend,
                augmentation,
            }),
        }
    }

    /// The same experiment without augmentation `index`, with the subset
    /// filter re-indexed accordingly.
    pub fn without_augmentation(&self, index: usize) -> Self {
        let mut out = self.clone();
        out.augmentations.remove(index);
        if let Some(subset) = &mut out.subset {
            subset.retain(|s| s.augmentation != Some(index));
            for s in subset.iter_mut() {
                if let Some(a) = s.augmentation.as_mut() {
                    if *a > index {
                        *a -= 1;
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Augmentation;

    #[test]
    fn defaults_fill_in() {
        let c = RunConfig::from_json(r#"{"backends": [{"kind": "oracle"}]}"#).unwrap();
        assert_eq!(c.tau, 0.6);
        assert_eq!(c.seed, 2024);
        assert_eq!(c.voting, VotingMode::ThresholdWeighted);
        assert!(c.include_baseline);
        assert_eq!(c.augmentations.len(), 4);
        c.validate_for(2).unwrap();
    }

    #[test]
    fn rejects_bad_configs() {
        for text in [
            r#"{"backends": []}"#,
            r#"{"backends": [{"kind": "oracle"}], "tau": 0}"#,
            r#"{"backends": [{"kind": "oracle"}], "tau": 1.5}"#,
            r#"{"backends": [{"kind": "oracle"}], "jobs": 0}"#,
            r#"{"backends": [{"kind": "oracle"}], "subset": [{"backend": 1, "augmentation": null}]}"#,
            r#"{"backends": [{"kind": "oracle"}], "augmentations": [{"kind": "gaussian_blur", "sigma": -1}]}"#,
        ] {
            let c = RunConfig::from_json(text).unwrap();
            assert!(c.validate().is_err(), "{text}");
        }
        assert!(RunConfig::from_json(r#"{"backends": [], "bogus": 1}"#).is_err());
    }

    #[test]
    fn removal_reindexes_subset() {
        let mut c = RunConfig::new(vec![BackendDescriptor::Constant {
            class: 0,
            confidence: 1.0,
        }]);
        c.subset = Some(vec![
            PairSelector { backend: 0, augmentation: None },
            PairSelector { backend: 0, augmentation: Some(1) },
            PairSelector { backend: 0, augmentation: Some(3) },
        ]);
        let r = c.without_augmentation(1);
        assert_eq!(r.augmentations.len(), 3);
        assert!(matches!(r.augmentations[1].kind, Augmentation::GaussianBlur { .. }));
        assert_eq!(
            r.subset.unwrap(),
            vec![
                PairSelector { backend: 0, augmentation: None },
                PairSelector { backend: 0, augmentation: Some(2) },
            ]
        );
    }
}
