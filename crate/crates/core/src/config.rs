//! Run configuration: model dimensions, optimizer settings, synthetic-task
//! knobs and ablation switches. Loaded from JSON; unknown keys are rejected.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const NONE_RELATION: usize = 0;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Shared feature width for both modalities.
    pub d: usize,
    /// Encoder depth (layer 0 is the embedding level).
    pub layers: usize,
    pub max_tokens: usize,
    pub max_objects: usize,
    /// Relation name -> id; id 0 is reserved for `none`.
    pub relations: BTreeMap<String, usize>,
    pub lambda: f64,
    pub sinkhorn_tol: f64,
    pub sinkhorn_max_iter: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub steps: usize,
    /// Evaluate the holdout split every this many steps.
    pub eval_every: usize,
    /// Fraction of samples routed to the holdout split by id hash.
    pub holdout_fraction: f64,
    pub vocab_size: usize,
    /// Object grids are `grid x grid` pixels.
    pub grid: usize,
    /// ViT-style patch edge; must divide `grid`.
    pub patch_size: usize,
    /// Feed-forward hidden width inside encoder blocks (0 = same as `d`).
    pub ffn_hidden: usize,
    /// Classifier hidden width (0 = `2 * d`).
    pub classifier_hidden: usize,
    /// Scale of random parameter initialization.
    pub init_scale: f64,
    /// Extra gain on encoder block weights; larger values bury low-level
    /// detail under position-mixed content in upper layers.
    pub encoder_gain: f64,
    /// How span representations are pooled: mean over the interior or the
    /// opening marker row.
    pub span_repr: SpanRepr,
    /// Allow candidate pairs whose head and tail are the same item.
    pub self_relations: bool,
    /// Which planted-rule generator `generate` uses.
    pub synthetic_variant: SyntheticVariant,
    pub ablation: AblationConfig,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SpanRepr {
    Mean,
    Marker,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticVariant {
    /// Token/depth/caption rules, learnable from high-level features.
    Standard,
    /// Relation signal planted only in per-position codes that upper
    /// encoder layers mix away; recoverable through low-level transport.
    LowLevel,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum MotVariant {
    OptimalTransport,
    CrossAttention,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Bypass multilevel fusion entirely (enhanced = raw).
    pub disable_mot: bool,
    /// Solver used inside the fusion module.
    pub mot_variant: MotVariant,
    /// Replace learned routing with uniform expert weights.
    pub disable_mmoe: bool,
    pub features: FeatureFlags,
    pub experts: ExpertFlags,
}

/// Input-channel switches mirroring the position/caption/depth ablations.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureFlags {
    pub position: bool,
    pub caption: bool,
    pub depth: bool,
}

/// Expert-group switches: text-to-vision and vision-to-text cross experts,
/// text-only and vision-only top-level experts.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertFlags {
    pub t2v: bool,
    pub v2t: bool,
    pub t: bool,
    pub v: bool,
}

impl Default for FeatureFlags {
    fn default() -> Self {
        FeatureFlags {
            position: true,
            caption: true,
            depth: true,
        }
    }
}

impl Default for ExpertFlags {
    fn default() -> Self {
        ExpertFlags {
            t2v: true,
            v2t: true,
            t: true,
            v: true,
        }
    }
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            disable_mot: false,
            mot_variant: MotVariant::OptimalTransport,
            disable_mmoe: false,
            features: FeatureFlags::default(),
            experts: ExpertFlags::default(),
        }
    }
}

fn default_relations() -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    m.insert("none".to_string(), 0);
    m.insert("ee_link".to_string(), 1);
    m.insert("in_front_of".to_string(), 2);
    m.insert("refers_to".to_string(), 3);
    m
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            d: 64,
            layers: 4,
            max_tokens: 128,
            max_objects: 12,
            relations: default_relations(),
            lambda: 0.1,
            sinkhorn_tol: 1e-6,
            sinkhorn_max_iter: 200,
            learning_rate: 1e-5,
            batch_size: 32,
            dropout: 0.5,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 7,
            steps: 1000,
            eval_every: 100,
            holdout_fraction: 0.2,
            vocab_size: 64,
            grid: 8,
            patch_size: 2,
            ffn_hidden: 0,
            classifier_hidden: 0,
            init_scale: 0.08,
            encoder_gain: 1.0,
            span_repr: SpanRepr::Mean,
            self_relations: false,
            synthetic_variant: SyntheticVariant::Standard,
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(json)
            .map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 8 || self.d % 8 != 0 {
            return Err(Error::Config(format!(
                "feature width d = {} must be a positive multiple of 8 (position channels)",
                self.d
            )));
        }
        if self.layers < 2 {
            return Err(Error::Config(format!(
                "encoder needs at least 2 layers, got {}",
                self.layers
            )));
        }
        if self.relations.get("none") != Some(&NONE_RELATION) {
            return Err(Error::Config(
                "relation vocabulary must map \"none\" to id 0".into(),
            ));
        }
        let mut ids: Vec<usize> = self.relations.values().copied().collect();
        ids.sort_unstable();
        if ids.iter().enumerate().any(|(i, &id)| i != id) {
            return Err(Error::Config(format!(
                "relation ids must be contiguous from 0, got {ids:?}"
            )));
        }
        if self.relations.len() < 2 {
            return Err(Error::Config(
                "relation vocabulary needs at least one relation besides none".into(),
            ));
        }
        if self.lambda <= 0.0 {
            return Err(Error::Config(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if self.sinkhorn_tol <= 0.0 || self.sinkhorn_max_iter == 0 {
            return Err(Error::Config("sinkhorn tolerance and max_iter must be positive".into()));
        }
        if self.patch_size == 0 || self.grid % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "patch size {} must divide grid {}",
                self.patch_size, self.grid
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.batch_size == 0 || self.max_tokens == 0 || self.max_objects == 0 {
            return Err(Error::Config("sizes must be positive".into()));
        }
        if self.vocab_size <= crate::data::FIRST_REGULAR_TOKEN {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room after the {} special tokens",
                self.vocab_size,
                crate::data::FIRST_REGULAR_TOKEN
            )));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout_fraction outside [0, 1)".into()));
        }
        let e = &self.ablation.experts;
        if !(e.t2v || e.v2t || e.t || e.v) {
            return Err(Error::Config("at least one expert group must stay enabled".into()));
        }
        Ok(())
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn relation_name(&self, id: usize) -> &str {
        self.relations
            .iter()
            .find(|(_, &v)| v == id)
            .map(|(k, _)| k.as_str())
            .unwrap_or("?")
    }

    /// Patches per grid: `u = grid^2 / patch^2`.
    pub fn patches_per_object(&self) -> usize {
        (self.grid / self.patch_size) * (self.grid / self.patch_size)
    }

    pub fn ffn_hidden_width(&self) -> usize {
        if self.ffn_hidden == 0 {
            self.d
        } else {
            self.ffn_hidden
        }
    }

    pub fn classifier_hidden_width(&self) -> usize {
        if self.classifier_hidden == 0 {
            2 * self.d
        } else {
            self.classifier_hidden
        }
    }

    /// Expert count for the routing softmax: 2L cross experts plus the two
    /// unimodal top-level experts.
    pub fn expert_count(&self) -> usize {
        2 * self.layers + 2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_json(r#"{"d": 64, "no_such_key": 1}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("no_such_key"));
    }

    #[test]
    fn none_relation_must_be_zero() {
        let mut cfg = RunConfig::default();
        cfg.relations = BTreeMap::from([("a".to_string(), 0), ("none".to_string(), 1)]);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn json_roundtrip() {
        let cfg = RunConfig::default();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back = RunConfig::from_json(&json).unwrap();
        assert_eq!(cfg, back);
    }
}
