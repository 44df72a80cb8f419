use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datahub::synthetic::{load_masks, MasksDoc};
use crate::datahub::{
    gen_synthetic_world, load_annotations_filtered, load_features, AnnotationMatrix, FeatureSet,
    WorldSpec,
};
use crate::error::{Error, Result};
use crate::evalsuite::{EvalOptions, ExperimentSetup};
use crate::fsio;
use crate::model::{ModelConfig, Variant};
use crate::trainer::TrainConfig;

/// Where samples come from: a generated world or files on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(WorldSpec),
    Files {
        features: PathBuf,
        annotations: PathBuf,
        #[serde(default)]
        masks: Option<PathBuf>,
        /// Labels treated as missing, e.g. "unknown".
        #[serde(default)]
        drop_labels: Vec<String>,
    },
}

/// Architecture knobs; sizes that the data determines are filled in later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "d_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "d_heads")]
    pub n_heads: usize,
    #[serde(default = "d_blocks")]
    pub n_blocks: usize,
    #[serde(default = "d_compression")]
    pub n_compression_queries: usize,
    /// Zero means "longest clip in the data" for frame sequences.
    #[serde(default)]
    pub max_frames: usize,
    #[serde(default = "d_hidden")]
    pub classifier_hidden: usize,
    #[serde(default = "d_variant")]
    pub variant: Variant,
    #[serde(default = "d_ln_eps")]
    pub ln_eps: f64,
}

fn d_hidden() -> usize {
    32
}
fn d_heads() -> usize {
    4
}
fn d_blocks() -> usize {
    2
}
fn d_compression() -> usize {
    32
}
fn d_variant() -> Variant {
    Variant::Full
}
fn d_ln_eps() -> f64 {
    1e-5
}

impl Default for ModelSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    #[serde(default = "d_train_frac")]
    pub train_fraction: f64,
    #[serde(default = "d_val_frac")]
    pub val_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn d_train_frac() -> f64 {
    0.8
}
fn d_val_frac() -> f64 {
    0.1
}

impl Default for SplitSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

fn d_out() -> PathBuf {
    PathBuf::from("runs/default")
}
fn d_seeds() -> Vec<u64> {
    (0..5).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub eval: EvalOptions,
    #[serde(default = "d_out")]
    pub out_dir: PathBuf,
    /// Seed for a single run: model init, batch order and removal.
    #[serde(default)]
    pub seed: u64,
    /// Seeds for sweeps and ablations.
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    /// Fraction of training annotations removed before a single run.
    #[serde(default)]
    pub removal_rate: f64,
}

impl RunConfig {
    /// Reads `path` (or starts from `{}`) and applies `key=value` overrides
    /// on dotted paths before validating.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value: Value = match path {
            Some(p) => serde_json::from_str(&fsio::read_string(p)?)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
        }
        if !(0.0..1.0).contains(&self.removal_rate) {
            return Err(Error::Config(format!("removal_rate {} outside [0, 1)", self.removal_rate)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let s = &self.split;
        if !(s.train_fraction > 0.0 && s.val_fraction > 0.0 && s.train_fraction + s.val_fraction < 1.0) {
            return Err(Error::Config("split fractions must be positive and sum below 1".into()));
        }
        // Catch architecture errors before any data is touched.
        self.model_config(2, 2, self.model.hidden_dim.max(1), None).validate()
    }

    /// Full model config for data with the given sizes.
    pub fn model_config(
        &self,
        n_annotators: usize,
        n_classes: usize,
        feature_dim: usize,
        longest_clip: Option<usize>,
    ) -> ModelConfig {
        let m = &self.model;
        let mut c = ModelConfig::new(n_annotators, n_classes, feature_dim).with_variant(m.variant);
        c.hidden_dim = m.hidden_dim;
        c.n_heads = m.n_heads;
        c.n_blocks = m.n_blocks;
        c.n_compression_queries = m.n_compression_queries;
        c.classifier_hidden = m.classifier_hidden;
        c.ln_eps = m.ln_eps;
        c.max_frames = match longest_clip {
            Some(t) if m.max_frames == 0 => t,
            Some(_) => m.max_frames,
            None => 0,
        };
        c
    }

    pub fn experiment(&self, model: ModelConfig) -> ExperimentSetup {
        ExperimentSetup {
            model,
            train: self.train.clone(),
            train_fraction: self.split.train_fraction,
            val_fraction: self.split.val_fraction,
            split_seed: self.split.seed,
            eval: self.eval,
        }
    }
}

/// Sets a dotted path such as `train.peak_lr=0.003`. The value is parsed as
/// JSON and kept as a string when that fails.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} has an empty segment")));
    }
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {} is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last segment")
}

/// Loaded samples plus planted masks when known.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: FeatureSet,
    pub annotations: AnnotationMatrix,
    pub masks: Option<MasksDoc>,
}

impl Dataset {
    pub fn load(source: &DataSource) -> Result<Self> {
        match source {
            DataSource::Synthetic(spec) => {
                let w = gen_synthetic_world(spec)?;
                let masks = Some(w.masks_doc());
                Ok(Self {
                    features: w.features,
                    annotations: w.annotations,
                    masks,
                })
            }
            DataSource::Files {
                features,
                annotations,
                masks,
                drop_labels,
            } => Ok(Self {
                features: load_features(features)?,
                annotations: load_annotations_filtered(annotations, drop_labels)?,
                masks: masks.as_deref().map(load_masks).transpose()?,
            }),
        }
    }

    pub fn longest_clip(&self) -> Option<usize> {
        self.features
            .is_sequence()
            .then(|| self.features.tensors.iter().map(|t| t.shape()[0]).max().unwrap_or(0))
    }

    pub fn model_config(&self, cfg: &RunConfig) -> Result<ModelConfig> {
        let dim = self
            .features
            .feature_dim()
            .ok_or_else(|| Error::Config("feature file holds no samples".into()))?;
        let mc = cfg.model_config(
            self.annotations.n_annotators(),
            self.annotations.n_classes(),
            dim,
            self.longest_clip(),
        );
        mc.validate()?;
        Ok(mc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_nest_and_parse_json() {
        let mut v = serde_json::json!({"train": {"peak_lr": 1.0}});
        apply_override(&mut v, "train.peak_lr=0.003").unwrap();
        apply_override(&mut v, "model.variant=no_self_attn").unwrap();
        apply_override(&mut v, "seeds=[1,2]").unwrap();
        assert_eq!(v["train"]["peak_lr"], 0.003);
        assert_eq!(v["model"]["variant"], "no_self_attn");
        assert_eq!(v["seeds"], serde_json::json!([1, 2]));
        assert!(apply_override(&mut v, "novalue").is_err());
        assert!(apply_override(&mut v, "seeds.x=1").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let base = ["data={\"synthetic\":{}}".to_string()];
        assert!(RunConfig::load(None, &base).is_ok());
        for bad in ["train.peak_rate=1", "bogus=1", "model.depth=3", "data.synthetic.n_sample=3"] {
            let r = RunConfig::load(None, &[base[0].clone(), bad.to_string()]);
            assert!(matches!(r, Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn invalid_values_fail_before_compute() {
        let base = "data={\"synthetic\":{}}".to_string();
        for bad in ["model.n_heads=5", "train.patience=0", "removal_rate=1.0", "split.train_fraction=0.95"] {
            assert!(RunConfig::load(None, &[base.clone(), bad.into()]).is_err(), "{bad}");
        }
    }
}
