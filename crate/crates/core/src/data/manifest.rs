//! Dataset manifest (`path,label,fold_hint` CSV) and its label-map sidecar.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::feature::{load_feature_file, FeatureFile};
use crate::error::{Error, Result};

/// File name of the label map, next to the manifest.
pub const LABEL_MAP_FILE: &str = "labels.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    /// Class names in id order.
    pub classes: Vec<String>,
    /// Informational provenance of the source audio.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_rate_hz: Option<u32>,
}

impl LabelMap {
    pub fn new(classes: Vec<String>) -> Result<Self> {
        let map = Self {
            classes,
            sample_rate_hz: None,
        };
        map.validate()?;
        Ok(map)
    }

    fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Config("label map needs at least two classes".into()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.classes.iter().find(|c| !seen.insert(c.as_str())) {
            return Err(Error::Config(format!("duplicate class name {dup:?}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Resolves a class name, or a numeric id in range.
    pub fn id_of(&self, label: &str) -> Option<usize> {
        self.classes
            .iter()
            .position(|c| c == label)
            .or_else(|| label.parse::<usize>().ok().filter(|&i| i < self.len()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: Self = serde_json::from_str(&text)?;
        map.validate()?;
        Ok(map)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub label: String,
    #[serde(default)]
    pub fold_hint: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Resolved against the manifest's directory.
    pub path: PathBuf,
    pub label: usize,
    pub fold_hint: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub labels: LabelMap,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Reads the CSV and the `labels.json` beside it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let dir = path.parent().unwrap_or(Path::new(""));
        let labels = LabelMap::load(dir.join(LABEL_MAP_FILE))?;
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "label", "fold_hint"] {
            return Err(Error::Config(format!(
                "{}: header must be path,label,fold_hint",
                path.display()
            )));
        }
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, row) in reader.deserialize::<ManifestRow>().enumerate() {
            let row = row?;
            let label = labels.id_of(&row.label).ok_or_else(|| {
                Error::LabelMismatch(format!(
                    "{} row {}: unknown label {:?}",
                    path.display(),
                    i + 1,
                    row.label
                ))
            })?;
            if !seen.insert(row.path.clone()) {
                return Err(Error::Config(format!("duplicate manifest path {}", row.path)));
            }
            entries.push(ManifestEntry {
                path: dir.join(&row.path),
                label,
                fold_hint: row.fold_hint.filter(|h| !h.is_empty()),
            });
        }
        if entries.is_empty() {
            return Err(Error::Config(format!("{}: manifest is empty", path.display())));
        }
        Ok(Self { labels, entries })
    }

    /// Writes `rows` to `path` and the label map beside it.
    pub fn write(path: impl AsRef<Path>, labels: &LabelMap, rows: &[ManifestRow]) -> Result<()> {
        let path = path.as_ref();
        let dir = path.parent().unwrap_or(Path::new(""));
        labels.save(dir.join(LABEL_MAP_FILE))?;
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        for row in rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }
}

/// Loaded utterances in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub labels: LabelMap,
    pub samples: Vec<FeatureFile>,
    pub fold_hints: Vec<Option<String>>,
}

impl Dataset {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let mut samples = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let f = load_feature_file(&e.path)?;
            if f.label as usize != e.label {
                return Err(Error::LabelMismatch(format!(
                    "{}: file label {} differs from manifest label {}",
                    e.path.display(),
                    f.label,
                    e.label
                )));
            }
            if let Some(first) = samples.first().map(FeatureFile::dim) {
                if f.dim() != first {
                    return Err(Error::shape(format!(
                        "{}: D = {} but earlier files have D = {first}",
                        e.path.display(),
                        f.dim()
                    )));
                }
            }
            samples.push(f);
        }
        Ok(Self {
            labels: manifest.labels.clone(),
            samples,
            fold_hints: manifest.entries.iter().map(|e| e.fold_hint.clone()).collect(),
        })
    }

    pub fn label_ids(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label as usize).collect()
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, FeatureFile::dim)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
