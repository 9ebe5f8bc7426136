use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PathBuf>,
    pub classes: usize,
}

/// Cases of one dataset. Relative paths are resolved against the manifest's
/// directory when loaded from a file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetManifest {
    pub name: String,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ManifestFile {
    List(Vec<ManifestEntry>),
    Named {
        #[serde(default)]
        name: Option<String>,
        entries: Vec<ManifestEntry>,
    },
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, entries: Vec<ManifestEntry>) -> Result<Self, PipelineError> {
        let m = Self {
            name: name.into(),
            entries,
        };
        m.validate()?;
        Ok(m)
    }

    /// Accepts either a bare list of entries or `{"name": ..., "entries": [...]}`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let parsed: ManifestFile = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Manifest(format!("{}: {e}", path.display())))?;
        let default_name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        let (name, mut entries) = match parsed {
            ManifestFile::List(entries) => (default_name, entries),
            ManifestFile::Named { name, entries } => (name.unwrap_or(default_name), entries),
        };
        let base = path.parent().unwrap_or(Path::new(""));
        for e in &mut entries {
            e.image = base.join(&e.image);
            if let Some(l) = &mut e.label {
                *l = base.join(&*l);
            }
        }
        Self::new(name, entries)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.id.is_empty() {
                return Err(PipelineError::Manifest("empty case id".into()));
            }
            if !seen.insert(e.id.as_str()) {
                return Err(PipelineError::Manifest(format!("duplicate case id {:?}", e.id)));
            }
        }
        let mut classes = self.entries.iter().map(|e| e.classes);
        if let Some(c) = classes.next() {
            if !(2..=256).contains(&c) {
                return Err(PipelineError::Manifest(format!(
                    "class count {c} must lie in 2..=256"
                )));
            }
            if let Some(other) = classes.find(|&o| o != c) {
                return Err(PipelineError::Manifest(format!(
                    "class counts differ between entries ({c} vs {other})"
                )));
            }
        }
        Ok(())
    }

    /// Shared class count; `None` for an empty manifest.
    pub fn num_classes(&self) -> Option<usize> {
        self.entries.first().map(|e| e.classes)
    }
}
