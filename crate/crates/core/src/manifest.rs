//! Dataset manifests: which volumes exist, where their annotations live, and
//! how they are split between training and validation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotations::read_centroids;
use crate::error::{Error, Result};
use crate::volume::read_volume;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

/// Default 4:1 split: every fifth sample (index 4, 9, ...) is held out.
pub fn split_for_index(index: usize) -> Split {
    if index % 5 == 4 {
        Split::Validation
    } else {
        Split::Train
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub volume: PathBuf,
    pub centroids: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory every entry path is relative to; not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Self {
        Self {
            entries,
            root: root.into(),
        }
    }

    /// Loads a manifest and checks that every referenced file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let path = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&path).map_err(|e| Error::storage(&path, e))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::format(&path, "manifest", e.to_string()))?;
        manifest.root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        for entry in &manifest.entries {
            let mut files = vec![&entry.volume, &entry.centroids];
            files.extend(entry.ground_truth.as_ref());
            for f in files {
                let full = manifest.root.join(f);
                if !full.is_file() {
                    return Err(Error::format(
                        &path,
                        "entries",
                        format!("entry {}: missing file {}", entry.id, full.display()),
                    ));
                }
            }
        }
        Ok(manifest)
    }

    /// Parses every referenced file; `load` only checks existence.
    pub fn validate_contents(&self) -> Result<()> {
        for entry in &self.entries {
            let vol = read_volume(self.resolve(&entry.volume))?;
            let centroids = read_centroids(self.resolve(&entry.centroids))?;
            centroids.validate_bounds(vol.dims())?;
            if let Some(gt) = &entry.ground_truth {
                let gt = read_volume(self.resolve(gt))?;
                if gt.dims() != vol.dims() {
                    return Err(Error::Argument(format!(
                        "entry {}: ground truth dims {:?} differ from volume {:?}",
                        entry.id,
                        gt.dims(),
                        vol.dims()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| Error::storage(&path, e))?;
        Ok(path)
    }

    pub fn resolve(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn train(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.split(Split::Train)
    }

    pub fn validation(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.split(Split::Validation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_to_one_split() {
        let splits: Vec<_> = (0..10).map(split_for_index).collect();
        assert_eq!(
            splits.iter().filter(|s| **s == Split::Validation).count(),
            2
        );
        assert_eq!(splits[4], Split::Validation);
        assert_eq!(splits[9], Split::Validation);
    }

    #[test]
    fn missing_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest::new(
            dir.path(),
            vec![ManifestEntry {
                id: "a".into(),
                volume: "a.vol".into(),
                centroids: "a.json".into(),
                ground_truth: None,
                split: Split::Train,
            }],
        );
        let path = m.save().unwrap();
        let err = DatasetManifest::load(&path).unwrap_err();
        assert!(err.to_string().contains("missing file"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        fs::write(&path, r#"{"entries": [], "extra": 1}"#).unwrap();
        assert!(DatasetManifest::load(&path).is_err());
    }
}
