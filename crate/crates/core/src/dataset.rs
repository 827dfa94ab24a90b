//! Paired (layout, reference image) training data.
//!
//! A dataset manifest is JSONL, one pair per line:
//! `{"layout": "labels/0001.png", "image": "images/0001.png"}`, with paths
//! relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CrnError, Result};
use crate::layout::{load_label_map, one_hot, LabelGrid, LabelMapping, ReferenceImage, SemanticLayout};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub layout: PathBuf,
    pub image: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub name: String,
    pub labels: LabelGrid,
    pub layout: SemanticLayout,
    pub image: ReferenceImage,
}

impl TrainingPair {
    pub fn new(name: impl Into<String>, labels: LabelGrid, num_classes: usize, image: ReferenceImage) -> Result<Self> {
        let name = name.into();
        if (labels.height(), labels.width()) != (image.height(), image.width()) {
            return Err(CrnError::Dimension(format!(
                "pair {name}: layout {}x{} vs image {}x{}",
                labels.height(),
                labels.width(),
                image.height(),
                image.width()
            )));
        }
        let layout = one_hot(&labels, num_classes)?;
        Ok(TrainingPair {
            name,
            labels,
            layout,
            image,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pairs: Vec<TrainingPair>,
}

impl Dataset {
    /// Errors on an empty set or on pairs of differing resolution or class count.
    pub fn new(pairs: Vec<TrainingPair>) -> Result<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| CrnError::Argument("dataset has no pairs".into()))?;
        let key = (first.layout.height(), first.layout.width(), first.layout.num_classes());
        for p in &pairs {
            let k = (p.layout.height(), p.layout.width(), p.layout.num_classes());
            if k != key {
                return Err(CrnError::Dimension(format!(
                    "pair {} is {}x{} with {} classes, expected {}x{} with {}",
                    p.name, k.0, k.1, k.2, key.0, key.1, key.2
                )));
            }
        }
        Ok(Dataset { pairs })
    }

    pub fn load_manifest(path: &Path, num_classes: usize, mapping: LabelMapping<'_>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CrnError::io(path, e))?;
        let root = path.parent().unwrap_or_else(|| Path::new("."));
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(line)
                .map_err(|e| CrnError::Schema(format!("{} line {}: {e}", path.display(), n + 1)))?;
            let layout_path = root.join(&entry.layout);
            let labels = load_label_map(&layout_path, mapping)?;
            let image = ReferenceImage::load(&root.join(&entry.image))?;
            let name = entry
                .layout
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("pair{n}"));
            pairs.push(TrainingPair::new(name, labels, num_classes, image)?);
        }
        Self::new(pairs)
    }

    pub fn pairs(&self) -> &[TrainingPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.pairs[0].layout.height(), self.pairs[0].layout.width())
    }

    pub fn num_classes(&self) -> usize {
        self.pairs[0].layout.num_classes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{save_label_map, save_rgb_png};
    use crate::tensor::{FeatureTensor, Shape};

    #[test]
    fn manifest_paths_resolve_against_its_directory() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("l")).unwrap();
        let grid = LabelGrid::new(4, 8, (0..32).map(|i| i % 3).collect()).unwrap();
        save_label_map(&grid, &dir.path().join("l/a.png")).unwrap();
        let img = FeatureTensor::from_fn(Shape::new(3, 4, 8), |c, y, x| (c + y + x) as f64 / 16.0);
        save_rgb_png(&img, &dir.path().join("a.png")).unwrap();
        let manifest = dir.path().join("train.jsonl");
        fs::write(&manifest, "{\"layout\":\"l/a.png\",\"image\":\"a.png\"}\n\n").unwrap();
        let ds = Dataset::load_manifest(&manifest, 3, LabelMapping::Identity).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.pairs()[0].name, "a");
        assert_eq!(ds.pairs()[0].labels, grid);
        assert_eq!(ds.resolution(), (4, 8));
    }

    #[test]
    fn unknown_manifest_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("m.jsonl");
        fs::write(&manifest, "{\"layout\":\"a\",\"image\":\"b\",\"extra\":1}\n").unwrap();
        let err = Dataset::load_manifest(&manifest, 3, LabelMapping::Identity).unwrap_err();
        assert!(matches!(err, CrnError::Schema(ref m) if m.contains("line 1")));
    }

    #[test]
    fn empty_and_mismatched_sets_are_rejected() {
        assert!(Dataset::new(Vec::new()).is_err());
        let grid = LabelGrid::new(2, 2, vec![0; 4]).unwrap();
        let image = ReferenceImage::new(FeatureTensor::zeros(Shape::new(3, 2, 4))).unwrap();
        assert!(matches!(TrainingPair::new("x", grid, 1, image), Err(CrnError::Dimension(_))));
    }
}
