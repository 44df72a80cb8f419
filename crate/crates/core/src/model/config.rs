use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feed-forward width as a multiple of `hidden_dim`.
pub const FF_MULT: usize = 4;

/// Architecture switch used by the ablation harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Annotator queries, shared self-attention, cross-attention, one
    /// classifier per annotator.
    Full,
    /// No query transformer: mean-pooled features straight into the
    /// per-annotator classifiers.
    Base,
    /// One classifier shared by every annotator representation.
    UnifiedClassifier,
    /// Queries skip the self-attention sub-layer.
    NoSelfAttn,
    /// Query outputs are mean-pooled into a single prediction.
    PreMvPool,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Base,
        Variant::UnifiedClassifier,
        Variant::NoSelfAttn,
        Variant::PreMvPool,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Base => "base",
            Variant::UnifiedClassifier => "unified_classifier",
            Variant::NoSelfAttn => "no_self_attn",
            Variant::PreMvPool => "pre_mv_pool",
        }
    }

    pub fn has_query_former(self) -> bool {
        self != Variant::Base
    }

    pub fn has_self_attention(self) -> bool {
        !matches!(self, Variant::Base | Variant::NoSelfAttn)
    }

    /// True when the model emits one logits row per annotator.
    pub fn per_annotator_output(self) -> bool {
        self != Variant::PreMvPool
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_hidden() -> usize {
    32
}
fn default_heads() -> usize {
    4
}
fn default_blocks() -> usize {
    2
}
fn default_compression() -> usize {
    32
}
fn default_classifier_hidden() -> usize {
    32
}
fn default_variant() -> Variant {
    Variant::Full
}
fn default_eps() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_annotators: usize,
    pub n_classes: usize,
    pub feature_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default = "default_blocks")]
    pub n_blocks: usize,
    /// Compression queries per frame in sequence mode.
    #[serde(default = "default_compression")]
    pub n_compression_queries: usize,
    /// Zero selects image mode; otherwise the model consumes frame sequences
    /// of up to this many frames.
    #[serde(default)]
    pub max_frames: usize,
    #[serde(default = "default_classifier_hidden")]
    pub classifier_hidden: usize,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_eps")]
    pub ln_eps: f64,
}

impl ModelConfig {
    pub fn new(n_annotators: usize, n_classes: usize, feature_dim: usize) -> Self {
        Self {
            n_annotators,
            n_classes,
            feature_dim,
            hidden_dim: default_hidden(),
            n_heads: default_heads(),
            n_blocks: default_blocks(),
            n_compression_queries: default_compression(),
            max_frames: 0,
            classifier_hidden: default_classifier_hidden(),
            variant: Variant::Full,
            ln_eps: default_eps(),
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn is_sequence(&self) -> bool {
        self.max_frames > 0
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    /// Width of the keys the annotator queries attend to.
    pub fn key_dim(&self) -> usize {
        if self.is_sequence() {
            self.hidden_dim
        } else {
            self.feature_dim
        }
    }

    pub fn classifier_in(&self) -> usize {
        if self.variant == Variant::Base {
            self.feature_dim
        } else {
            self.hidden_dim
        }
    }

    pub fn n_classifiers(&self) -> usize {
        match self.variant {
            Variant::UnifiedClassifier | Variant::PreMvPool => 1,
            _ => self.n_annotators,
        }
    }

    /// Rows of the logits matrix.
    pub fn output_rows(&self) -> usize {
        if self.variant.per_annotator_output() {
            self.n_annotators
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_annotators == 0 {
            return fail("n_annotators must be >= 1".into());
        }
        if self.n_classes < 2 {
            return fail(format!("n_classes must be >= 2, got {}", self.n_classes));
        }
        if self.feature_dim == 0 || self.hidden_dim == 0 || self.classifier_hidden == 0 {
            return fail("feature_dim, hidden_dim and classifier_hidden must be positive".into());
        }
        if self.n_heads == 0 || !self.hidden_dim.is_multiple_of(self.n_heads) {
            return fail(format!(
                "hidden_dim {} is not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            ));
        }
        if self.n_blocks == 0 && self.variant.has_query_former() {
            return fail("n_blocks must be >= 1".into());
        }
        if self.is_sequence() && self.n_compression_queries == 0 {
            return fail("sequence mode needs n_compression_queries >= 1".into());
        }
        if !(self.ln_eps > 0.0) {
            return fail(format!("ln_eps must be > 0, got {}", self.ln_eps));
        }
        Ok(())
    }

    /// Closed-form number of learnable scalars.
    pub fn param_count(&self) -> usize {
        let h = self.hidden_dim;
        let norm = 2 * h;
        let attn = |kv: usize| (h * h + h) + kv * h + (kv * h + h) + (h * h + h);
        let ff = h * FF_MULT * h + FF_MULT * h + FF_MULT * h * h + h;
        let block = |kv: usize, self_attn: bool| {
            (if self_attn { norm + attn(h) } else { 0 }) + norm + attn(kv) + norm + ff
        };
        let former = |queries: usize, kv: usize, blocks: usize, self_attn: bool| {
            queries * h + blocks * block(kv, self_attn) + norm
        };
        let classifier = {
            let (i, c, k) = (self.classifier_in(), self.classifier_hidden, self.n_classes);
            i * c + c + c * k + k
        };
        let mut total = self.n_classifiers() * classifier;
        if self.variant.has_query_former() {
            total += former(
                self.n_annotators,
                self.key_dim(),
                self.n_blocks,
                self.variant.has_self_attention(),
            );
            total += h * h + h;
            if self.is_sequence() {
                total += former(self.n_compression_queries, self.feature_dim, 1, true);
                total += self.max_frames * h;
            }
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_from_json() {
        let cfg: ModelConfig =
            serde_json::from_str(r#"{"n_annotators":3,"n_classes":4,"feature_dim":8}"#).unwrap();
        assert_eq!(cfg.hidden_dim, 32);
        assert_eq!(cfg.n_blocks, 2);
        assert_eq!(cfg.variant, Variant::Full);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let r: std::result::Result<ModelConfig, _> = serde_json::from_str(
            r#"{"n_annotators":3,"n_classes":4,"feature_dim":8,"depth":2}"#,
        );
        assert!(r.is_err());
    }

    #[test]
    fn invalid_configs() {
        let mut c = ModelConfig::new(3, 4, 8);
        c.n_heads = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = ModelConfig::new(0, 4, 8);
        assert!(c.validate().is_err());
        let c = ModelConfig::new(2, 1, 8);
        assert!(c.validate().is_err());
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
        }
        assert!("nope".parse::<Variant>().is_err());
    }
}
