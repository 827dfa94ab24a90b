//! JSON configuration files. Unknown keys are rejected everywhere.

use std::fs;
use std::path::{Path, PathBuf};

use crn_core::checkpoint::ModelConfig;
use crn_core::dataset::Dataset;
use crn_core::layout::{LabelMapping, RemapTable};
use crn_core::perceiver::{load_perceiver_weights, Perceiver};
use crn_core::trainer::TrainConfig;
use crn_study::{SentinelSpec, TimingMode};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerceiverKind {
    Desk,
    Vgg19,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerceiverConfig {
    pub arch: PerceiverKind,
    /// Seed for randomly initialized weights; ignored with `weights`.
    #[serde(default)]
    pub seed: u64,
    /// Converted weight archive directory.
    #[serde(default)]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MappingConfig {
    /// Label values are class indices.
    Identity,
    /// Cityscapes label ids to the 19 evaluation classes, everything else void (0).
    Cityscapes,
    /// JSON object `{raw_id: class}`.
    Table(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// JSONL of `{"layout", "image"}` pairs.
    pub manifest: PathBuf,
    #[serde(default = "identity")]
    pub labels: MappingConfig,
    /// Reject label ids missing from the table instead of mapping them to void.
    #[serde(default)]
    pub strict_labels: bool,
}

fn identity() -> MappingConfig {
    MappingConfig::Identity
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub perceiver: PerceiverConfig,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

/// Reads a strict JSON config; relative paths inside it are resolved by the caller.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Label remapping table resolved from a [`MappingConfig`].
pub enum LoadedMapping {
    Identity,
    Table(RemapTable, bool),
}

impl LoadedMapping {
    pub fn load(config: &MappingConfig, strict: bool, base: &Path) -> Result<Self, Failure> {
        Ok(match config {
            MappingConfig::Identity => LoadedMapping::Identity,
            MappingConfig::Cityscapes => LoadedMapping::Table(RemapTable::cityscapes(), strict),
            MappingConfig::Table(p) => {
                LoadedMapping::Table(RemapTable::load(&resolve(base, p)).map_err(Failure::usage)?, strict)
            }
        })
    }

    pub fn as_mapping(&self) -> LabelMapping<'_> {
        match self {
            LoadedMapping::Identity => LabelMapping::Identity,
            LoadedMapping::Table(table, strict) => LabelMapping::Remap { table, strict: *strict },
        }
    }
}

impl RunConfig {
    pub fn load_perceiver(&self, base: &Path) -> Result<Perceiver, Failure> {
        let p = &self.perceiver;
        match (&p.weights, p.arch) {
            (Some(dir), arch) => {
                let perceiver = load_perceiver_weights(&resolve(base, dir)).map_err(Failure::usage)?;
                let loaded = match arch {
                    PerceiverKind::Desk => crn_core::perceiver::PerceiverArch::Desk,
                    PerceiverKind::Vgg19 => crn_core::perceiver::PerceiverArch::Vgg19,
                };
                if perceiver.spec().arch != loaded {
                    return Err(Failure::usage(format!(
                        "perceiver.weights holds a {:?} perceiver but perceiver.arch is {arch:?}",
                        perceiver.spec().arch
                    )));
                }
                Ok(perceiver)
            }
            (None, PerceiverKind::Desk) => Ok(Perceiver::desk(p.seed)),
            (None, PerceiverKind::Vgg19) => Ok(Perceiver::vgg19_seeded(p.seed)),
        }
    }

    pub fn load_dataset(&self, base: &Path) -> Result<Dataset, Failure> {
        let mapping = LoadedMapping::load(&self.dataset.labels, self.dataset.strict_labels, base)?;
        Dataset::load_manifest(
            &resolve(base, &self.dataset.manifest),
            self.model.num_classes(),
            mapping.as_mapping(),
        )
        .map_err(|e| Failure::usage(format!("dataset.manifest: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    /// JSON object `{condition_id: image_directory}`.
    pub conditions: PathBuf,
    /// Layout ids; defaults to the ids present in every condition directory.
    #[serde(default)]
    pub layouts: Option<Vec<String>>,
    /// Condition pairs to compare; defaults to every pair.
    #[serde(default)]
    pub pairs: Option<Vec<(String, String)>>,
    #[serde(default)]
    pub sentinels: Option<SentinelSpec>,
    #[serde(default = "unlimited")]
    pub timing: TimingMode,
}

fn unlimited() -> TimingMode {
    TimingMode::Unlimited
}
