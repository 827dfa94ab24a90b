//! Architecture-agnostic model handle and checkpoint I/O.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::{load_archive, read_manifest, save_archive, ArchiveHeader};
use crate::baselines::{EncoderDecoderCache, EncoderDecoderConfig, EncoderDecoderModel, FullResCache, FullResConfig, FullResModel};
use crate::cascade::{CascadeCache, CascadeConfig, CascadeModel};
use crate::error::{CrnError, Result};
use crate::layout::SemanticLayout;
use crate::model::SynthesisModel;
use crate::params::{GradStore, ParamStore};
use crate::tensor::FeatureTensor;

/// Model configuration tagged by architecture kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Crn(CascadeConfig),
    Fullres(FullResConfig),
    EncoderDecoder(EncoderDecoderConfig),
}

impl ModelConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelConfig::Crn(_) => "crn",
            ModelConfig::Fullres(_) => "fullres",
            ModelConfig::EncoderDecoder(_) => "encoder_decoder",
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ModelConfig::Crn(c) => c.num_classes,
            ModelConfig::Fullres(c) => c.num_classes,
            ModelConfig::EncoderDecoder(c) => c.num_classes,
        }
    }

    pub fn output_multiplicity(&self) -> usize {
        match self {
            ModelConfig::Crn(c) => c.output_multiplicity,
            ModelConfig::Fullres(c) => c.output_multiplicity,
            ModelConfig::EncoderDecoder(c) => c.output_multiplicity,
        }
    }

    pub fn set_output_multiplicity(&mut self, k: usize) {
        match self {
            ModelConfig::Crn(c) => c.output_multiplicity = k,
            ModelConfig::Fullres(c) => c.output_multiplicity = k,
            ModelConfig::EncoderDecoder(c) => c.output_multiplicity = k,
        }
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(match self {
            ModelConfig::Crn(c) => {
                c.validate()?;
                c.param_count()
            }
            ModelConfig::Fullres(c) => {
                c.validate()?;
                c.param_count()
            }
            ModelConfig::EncoderDecoder(c) => {
                c.validate()?;
                c.param_count()
            }
        })
    }

    /// The config without its `kind` tag, as stored in checkpoint headers.
    fn untagged(&self) -> serde_json::Value {
        match self {
            ModelConfig::Crn(c) => serde_json::to_value(c),
            ModelConfig::Fullres(c) => serde_json::to_value(c),
            ModelConfig::EncoderDecoder(c) => serde_json::to_value(c),
        }
        .expect("configs serialize")
    }

    fn from_header(header: &ArchiveHeader) -> Result<Self> {
        let parse = |what: &str| CrnError::Schema(format!("checkpoint config for kind {what:?} is invalid"));
        let cfg = header.config.clone();
        Ok(match header.kind.as_str() {
            "crn" => ModelConfig::Crn(serde_json::from_value(cfg).map_err(|_| parse("crn"))?),
            "fullres" => ModelConfig::Fullres(serde_json::from_value(cfg).map_err(|_| parse("fullres"))?),
            "encoder_decoder" => {
                ModelConfig::EncoderDecoder(serde_json::from_value(cfg).map_err(|_| parse("encoder_decoder"))?)
            }
            other => return Err(CrnError::Schema(format!("unknown model kind {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Crn(CascadeModel),
    Fullres(FullResModel),
    EncoderDecoder(EncoderDecoderModel),
}

#[derive(Debug, Clone)]
pub enum AnyCache {
    Crn(CascadeCache),
    Fullres(FullResCache),
    EncoderDecoder(EncoderDecoderCache),
}

macro_rules! dispatch {
    ($self:expr, $m:ident => $body:expr) => {
        match $self {
            AnyModel::Crn($m) => $body,
            AnyModel::Fullres($m) => $body,
            AnyModel::EncoderDecoder($m) => $body,
        }
    };
}

impl AnyModel {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(match config {
            ModelConfig::Crn(c) => AnyModel::Crn(CascadeModel::new(c.clone(), seed)?),
            ModelConfig::Fullres(c) => AnyModel::Fullres(FullResModel::new(c.clone(), seed)?),
            ModelConfig::EncoderDecoder(c) => AnyModel::EncoderDecoder(EncoderDecoderModel::new(c.clone(), seed)?),
        })
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            AnyModel::Crn(m) => ModelConfig::Crn(m.config().clone()),
            AnyModel::Fullres(m) => ModelConfig::Fullres(m.config().clone()),
            AnyModel::EncoderDecoder(m) => ModelConfig::EncoderDecoder(m.config().clone()),
        }
    }

    pub fn save_checkpoint(&self, dir: &Path, step: u64, seed: u64) -> Result<()> {
        let config = self.config();
        let header = ArchiveHeader {
            kind: config.kind().into(),
            config: config.untagged(),
            step,
            seed,
        };
        save_archive(dir, &header, self.params())
    }

    /// Rebuilds the architecture named in the header and loads its weights.
    pub fn load_checkpoint(dir: &Path) -> Result<(Self, ArchiveHeader)> {
        let manifest = read_manifest(dir)?;
        let config = ModelConfig::from_header(&manifest.header)?;
        let (header, stored) = load_archive(dir)?;
        let mut model = AnyModel::build(&config, header.seed)?;
        if stored.len() != model.params().len() {
            return Err(CrnError::Schema(format!(
                "checkpoint holds {} tensors, a {} model has {}",
                stored.len(),
                config.kind(),
                model.params().len()
            )));
        }
        model.params_mut().load_from(&stored)?;
        Ok((model, header))
    }
}

impl SynthesisModel for AnyModel {
    type Cache = AnyCache;

    fn kind(&self) -> &'static str {
        dispatch!(self, m => m.kind())
    }

    fn num_classes(&self) -> usize {
        dispatch!(self, m => m.num_classes())
    }

    fn output_multiplicity(&self) -> usize {
        dispatch!(self, m => m.output_multiplicity())
    }

    fn params(&self) -> &ParamStore {
        dispatch!(self, m => m.params())
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        dispatch!(self, m => m.params_mut())
    }

    fn check_layout(&self, layout: &SemanticLayout) -> Result<()> {
        dispatch!(self, m => m.check_layout(layout))
    }

    fn forward_train(&self, layout: &SemanticLayout) -> Result<(Vec<FeatureTensor>, AnyCache)> {
        Ok(match self {
            AnyModel::Crn(m) => {
                let (y, c) = m.forward_train(layout)?;
                (y, AnyCache::Crn(c))
            }
            AnyModel::Fullres(m) => {
                let (y, c) = m.forward_train(layout)?;
                (y, AnyCache::Fullres(c))
            }
            AnyModel::EncoderDecoder(m) => {
                let (y, c) = m.forward_train(layout)?;
                (y, AnyCache::EncoderDecoder(c))
            }
        })
    }

    fn backward(&self, cache: &AnyCache, grad_images: &[FeatureTensor]) -> Result<GradStore> {
        match (self, cache) {
            (AnyModel::Crn(m), AnyCache::Crn(c)) => m.backward(c, grad_images),
            (AnyModel::Fullres(m), AnyCache::Fullres(c)) => m.backward(c, grad_images),
            (AnyModel::EncoderDecoder(m), AnyCache::EncoderDecoder(c)) => m.backward(c, grad_images),
            _ => Err(CrnError::Argument("cache was produced by a different architecture".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{one_hot, LabelGrid};

    fn configs() -> Vec<ModelConfig> {
        vec![
            ModelConfig::Crn(CascadeConfig {
                base_h: 2,
                base_w: 4,
                module_count: 2,
                channels: vec![3, 2],
                num_classes: 2,
                output_multiplicity: 2,
                lrelu_slope: 0.2,
            }),
            ModelConfig::Fullres(FullResConfig {
                layer_count: 2,
                feature_maps: 3,
                ..FullResConfig::new(2, 2)
            }),
            ModelConfig::EncoderDecoder(EncoderDecoderConfig {
                depth: 1,
                base_channels: 2,
                ..EncoderDecoderConfig::new(2, 2)
            }),
        ]
    }

    #[test]
    fn checkpoint_round_trip_for_every_kind() {
        let grid = LabelGrid::new(4, 8, (0..32).map(|i| (i / 5) % 2).collect()).unwrap();
        let layout = one_hot(&grid, 2).unwrap();
        for config in configs() {
            let dir = tempfile::tempdir().unwrap();
            let model = AnyModel::build(&config, 5).unwrap();
            model.save_checkpoint(dir.path(), 12, 5).unwrap();
            let (loaded, header) = AnyModel::load_checkpoint(dir.path()).unwrap();
            assert_eq!(header.kind, config.kind());
            assert_eq!(header.step, 12);
            assert_eq!(loaded, model);
            assert_eq!(loaded.forward(&layout).unwrap(), model.forward(&layout).unwrap());
            assert_eq!(config.param_count().unwrap(), model.params().scalar_count());
        }
    }

    #[test]
    fn unknown_kind_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let header = ArchiveHeader {
            kind: "gan".into(),
            config: serde_json::json!({}),
            step: 0,
            seed: 0,
        };
        save_archive(dir.path(), &header, &ParamStore::new()).unwrap();
        assert!(matches!(AnyModel::load_checkpoint(dir.path()), Err(CrnError::Schema(_))));
    }

    #[test]
    fn tagged_config_parses_strictly() {
        let ok: ModelConfig = serde_json::from_str(
            r#"{"kind":"fullres","layer_count":3,"feature_maps":4,"num_classes":2,"output_multiplicity":1}"#,
        )
        .unwrap();
        assert_eq!(ok.kind(), "fullres");
        assert!(serde_json::from_str::<ModelConfig>(
            r#"{"kind":"fullres","layers":3,"num_classes":2,"output_multiplicity":1}"#
        )
        .is_err());
    }
}
