//! Experiment configuration.
//!
//! One JSON file describes a whole experiment: the synthetic task, the model
//! architecture, pretraining, the corruption grid, the scenario, the
//! adaptation settings and the seed list. Unknown keys are rejected, and
//! every referenced value is validated before anything runs.
//!
//! All randomness in a run flows from the per-episode seed (plus the fixed
//! task seed for the source data), split per purpose, so a config plus a
//! seed reproduces an episode exactly.

use serde::{Deserialize, Serialize};

use crate::adapt::{AdaptConfig, Method, PretrainConfig};
use crate::data::{CorruptionSpec, Family, Scenario, StreamSpec, SyntheticTask, TaskKind};
use crate::error::{Error, Result};
use crate::nn::{Activation, InputShape, LayerOp, LayerSpec, ModelSpec, NormKind};
use crate::rng::mix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of encoder layers.
    pub layers: usize,
    /// Channels (conv) or width (linear) of every encoder layer.
    pub channels: usize,
    pub norm: Option<NormKind>,
    pub act: Activation,
    /// Augment after this layer (0 = after the first layer).
    pub aug_position: usize,
}

impl ModelConfig {
    pub fn to_spec(&self, task: &SyntheticTask) -> Result<ModelSpec> {
        let (input, op) = match task.kind {
            TaskKind::Blobs { dim } => (InputShape::Vector { dim }, LayerOp::Linear),
            TaskKind::Patterns => (
                InputShape::Image {
                    channels: crate::data::PATTERN_CHANNELS,
                    height: crate::data::PATTERN_SIDE,
                    width: crate::data::PATTERN_SIDE,
                },
                LayerOp::Conv3x3,
            ),
        };
        if self.layers == 0 {
            return Err(Error::Config("model.layers must be >= 1".into()));
        }
        if self.aug_position >= self.layers {
            return Err(Error::Config(format!(
                "model.aug_position {} out of range for {} layers",
                self.aug_position, self.layers
            )));
        }
        Ok(ModelSpec {
            input,
            layers: (0..self.layers)
                .map(|_| LayerSpec {
                    op,
                    out_channels: self.channels,
                    norm: self.norm,
                    act: self.act,
                })
                .collect(),
            num_classes: task.num_classes,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionGrid {
    pub families: Vec<Family>,
    pub severities: Vec<u8>,
}

impl CorruptionGrid {
    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() || self.severities.is_empty() {
            return Err(Error::Config("corruption grid must be non-empty".into()));
        }
        for &s in &self.severities {
            if s > 5 {
                return Err(Error::Config(format!("severity {s} out of range 0..=5")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: SyntheticTask,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    /// Samples in the adaptation pool (one pass defines the episode length
    /// unless `num_batches` caps it).
    pub pool_size: usize,
    pub num_batches: Option<usize>,
    pub corruptions: CorruptionGrid,
    pub scenario: Scenario,
    pub method: Method,
    pub adapt: AdaptConfig,
    pub out_dir: Option<String>,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.task.num_classes < 2 {
            return Err(Error::Config("task.num_classes must be >= 2".into()));
        }
        if !(self.task.separation > 0.0) {
            return Err(Error::Config("task.separation must be positive".into()));
        }
        if self.pool_size < self.task.num_classes {
            return Err(Error::Config(format!(
                "pool_size {} cannot cover {} classes",
                self.pool_size, self.task.num_classes
            )));
        }
        self.model.to_spec(&self.task)?;
        self.corruptions.validate()?;
        self.adapt.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds list must be non-empty".into()));
        }
        if self.pretrain.batch_size == 0 {
            return Err(Error::Config("pretrain.batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// All (family, severity, seed) episodes of the grid, in a stable order.
    pub fn episodes(&self) -> Vec<(Family, u8, u64)> {
        let mut out = Vec::new();
        for &family in &self.corruptions.families {
            for &severity in &self.corruptions.severities {
                for &seed in &self.seeds {
                    out.push((family, severity, seed));
                }
            }
        }
        out
    }

    /// The stream for one episode. Ordering and corruption noise are both
    /// derived from the episode seed and the grid position.
    pub fn stream_spec(&self, family: Family, severity: u8, seed: u64) -> StreamSpec {
        let salt = (family as u64) << 3 | severity as u64;
        StreamSpec {
            scenario: self.scenario,
            batch_size: self.adapt.batch_size,
            num_batches: self.num_batches,
            corruption: CorruptionSpec { family, severity, seed: mix(seed, 0xC0F_F00 ^ salt) },
            seed: mix(seed, 0x57AE_A3 ^ salt),
        }
    }

    /// Adapt settings for one episode seed.
    pub fn adapt_for_seed(&self, seed: u64) -> AdaptConfig {
        AdaptConfig { seed, method: self.method, ..self.adapt.clone() }
    }
}

/// Applies a `key=value` override to a JSON config document. `key` is a
/// dot-separated path; `value` is parsed as JSON when possible and falls
/// back to a bare string.
pub fn apply_override(doc: &mut serde_json::Value, key: &str, value: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (leaf, parents) = parts.split_last().expect("split produces at least one part");
    let mut cursor = doc;
    for (i, part) in parents.iter().enumerate() {
        let obj = cursor.as_object_mut().ok_or_else(|| {
            Error::Config(format!("override `{key}`: `{}` is not an object", parts[..i].join(".")))
        })?;
        cursor = obj
            .entry((*part).to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    let obj = cursor.as_object_mut().ok_or_else(|| {
        Error::Config(format!("override `{key}`: parent is not an object"))
    })?;
    let parsed: serde_json::Value = serde_json::from_str(value)
        .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
    obj.insert((*leaf).to_string(), parsed);
    Ok(())
}

/// A small, fast default experiment on the patterns task.
pub fn default_experiment() -> ExperimentConfig {
    ExperimentConfig {
        task: SyntheticTask {
            kind: TaskKind::Patterns,
            num_classes: 8,
            separation: 4.0,
            seed: 1,
        },
        model: ModelConfig {
            layers: 4,
            channels: 8,
            norm: Some(NormKind::Group { num_groups: 2 }),
            act: Activation::Gelu,
            aug_position: 2,
        },
        pretrain: PretrainConfig::default(),
        pool_size: 1024,
        num_batches: None,
        corruptions: CorruptionGrid { families: vec![Family::GaussNoise], severities: vec![5] },
        scenario: Scenario::Normal,
        method: Method::EntMinFata,
        adapt: AdaptConfig::default(),
        out_dir: None,
        seeds: vec![0],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_roundtrips_and_validates() {
        let cfg = default_experiment();
        cfg.validate().unwrap();
        let json = cfg.to_json_pretty().unwrap();
        let back = ExperimentConfig::from_json(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut doc: serde_json::Value =
            serde_json::from_str(&default_experiment().to_json_pretty().unwrap()).unwrap();
        doc.as_object_mut()
            .unwrap()
            .insert("surprise".into(), serde_json::json!(1));
        let err = ExperimentConfig::from_json(&doc.to_string()).unwrap_err();
        assert!(err.to_string().contains("surprise"), "{err}");
    }

    #[test]
    fn missing_field_names_the_field() {
        let mut doc: serde_json::Value =
            serde_json::from_str(&default_experiment().to_json_pretty().unwrap()).unwrap();
        doc.as_object_mut().unwrap().remove("task");
        let err = ExperimentConfig::from_json(&doc.to_string()).unwrap_err();
        assert!(err.to_string().contains("task"), "{err}");
    }

    #[test]
    fn override_paths() {
        let mut doc: serde_json::Value =
            serde_json::from_str(&default_experiment().to_json_pretty().unwrap()).unwrap();
        apply_override(&mut doc, "adapt.sigma_n", "0.5").unwrap();
        apply_override(&mut doc, "scenario", "batch1").unwrap();
        apply_override(&mut doc, "seeds", "[1,2,3]").unwrap();
        let cfg = ExperimentConfig::from_json(&doc.to_string()).unwrap();
        assert_eq!(cfg.adapt.sigma_n, 0.5);
        assert_eq!(cfg.scenario, Scenario::Batch1);
        assert_eq!(cfg.seeds, vec![1, 2, 3]);
    }

    #[test]
    fn episode_grid_cardinality() {
        let mut cfg = default_experiment();
        cfg.corruptions.families = vec![Family::GaussNoise, Family::Contrast];
        cfg.corruptions.severities = vec![1, 5];
        cfg.seeds = vec![0, 1, 2];
        assert_eq!(cfg.episodes().len(), 12);
    }

    #[test]
    fn aug_position_bound_checked() {
        let mut cfg = default_experiment();
        cfg.model.aug_position = 4;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn stream_spec_distinct_across_grid() {
        let cfg = default_experiment();
        let a = cfg.stream_spec(Family::GaussNoise, 5, 0);
        let b = cfg.stream_spec(Family::Contrast, 5, 0);
        assert_ne!(a.corruption.seed, b.corruption.seed);
        assert_ne!(a.seed, b.seed);
        let c = cfg.stream_spec(Family::GaussNoise, 5, 0);
        assert_eq!(a, c, "same grid cell, same spec");
    }
}
