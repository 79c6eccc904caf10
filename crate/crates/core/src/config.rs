//! Run configuration: a sectioned JSON document with defaults, strict
//! unknown-key rejection, and `DYNAFUSE_`-prefixed environment overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{DynafuseError, Result};
use crate::fusion::FusionOrder;
use crate::grid::GridSpec;
use crate::head::AltMode;
use crate::params::{InteractionMode, PipelineDims};
use crate::synth::{Modality, SceneGenConfig};
use crate::train::{PipeModality, TrainConfig};

pub const ENV_PREFIX: &str = "DYNAFUSE_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub grid: GridSpec,
    pub dims: PipelineDims,
    pub interaction_mode: InteractionMode,
    pub fusion_order: FusionOrder,
    pub encoder_layers: usize,
    pub specialty_weight_sharing: bool,
    pub modality: PipeModality,
}

impl Default for PipelineSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        PipelineSection {
            grid: t.spec,
            dims: t.dims,
            interaction_mode: t.interaction_mode,
            fusion_order: t.fusion_order,
            encoder_layers: t.encoder_layers,
            specialty_weight_sharing: t.specialty_weight_sharing,
            modality: t.modality,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub seed: u64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub steps: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub tda: bool,
    pub mise: bool,
    pub alt: bool,
    pub align_pair: bool,
    pub align_gt: bool,
    pub mi: bool,
    pub se: bool,
    pub alt_mode: AltMode,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
    pub zeta: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            seed: t.seed,
            train_scenes: t.train_scenes,
            val_scenes: t.val_scenes,
            steps: t.steps,
            lr: t.lr,
            clip_norm: t.clip_norm,
            tda: t.tda,
            mise: t.mise,
            alt: t.alt,
            align_pair: t.align_pair,
            align_gt: t.align_gt,
            mi: t.mi,
            se: t.se,
            alt_mode: t.alt_mode,
            alpha: t.alpha,
            beta: t.beta,
            gamma: t.gamma,
            eta: t.eta,
            zeta: t.zeta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub top_k: usize,
    pub score_thresh: f64,
    pub scenes: usize,
    pub seed: u64,
    pub dropout: f64,
    pub dropout_modality: Option<Modality>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        EvalSection {
            top_k: t.top_k,
            score_thresh: t.score_thresh,
            scenes: 20,
            seed: 1000,
            dropout: 0.0,
            dropout_modality: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub table: String,
    pub jobs: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            table: "IVa".to_string(),
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneGenConfig,
    pub pipeline: PipelineSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub ablation: AblationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            // the desk-scale scene defaults live on TrainConfig; keep the
            // file format's defaults identical so an empty config trains
            // the same model
            scene: TrainConfig::default().scene,
            pipeline: PipelineSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            ablation: AblationSection::default(),
        }
    }
}

impl RunConfig {
    /// Flatten the sections into the training-loop config.
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.train.seed,
            train_scenes: self.train.train_scenes,
            val_scenes: self.train.val_scenes,
            steps: self.train.steps,
            lr: self.train.lr,
            clip_norm: self.train.clip_norm,
            tda: self.train.tda,
            mise: self.train.mise,
            alt: self.train.alt,
            align_pair: self.train.align_pair,
            align_gt: self.train.align_gt,
            mi: self.train.mi,
            se: self.train.se,
            alt_mode: self.train.alt_mode,
            interaction_mode: self.pipeline.interaction_mode,
            fusion_order: self.pipeline.fusion_order,
            encoder_layers: self.pipeline.encoder_layers,
            specialty_weight_sharing: self.pipeline.specialty_weight_sharing,
            modality: self.pipeline.modality,
            alpha: self.train.alpha,
            beta: self.train.beta,
            gamma: self.train.gamma,
            eta: self.train.eta,
            zeta: self.train.zeta,
            top_k: self.eval.top_k,
            score_thresh: self.eval.score_thresh,
            scene: self.scene.clone(),
            spec: self.pipeline.grid.clone(),
            dims: self.pipeline.dims,
        }
    }
}

fn config_err(path: &str, message: impl std::fmt::Display) -> DynafuseError {
    DynafuseError::Config {
        path: path.to_string(),
        message: message.to_string(),
    }
}

/// Merge `over` onto `base` recursively; objects merge key-wise, anything
/// else replaces.
fn merge_value(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_value(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Route one `DYNAFUSE_SECTION_KEY` override into the fully-populated
/// document: each path segment is matched case-insensitively against the
/// object's keys (longest key first, so `CLIP_NORM` finds `clip_norm`).
fn apply_override(doc: &mut Value, name: &str, raw: &str) -> Result<()> {
    let mut rest = name.to_string();
    let mut node = doc;
    let mut trail = String::new();
    loop {
        let obj = match node {
            Value::Object(o) => o,
            _ => return Err(config_err(&trail, format!("cannot descend into `{trail}` for {ENV_PREFIX}{name}"))),
        };
        let mut keys: Vec<String> = obj.keys().cloned().collect();
        keys.sort_by_key(|k| std::cmp::Reverse(k.len()));
        let mut matched = None;
        for k in keys {
            let upper = k.to_uppercase();
            if rest == upper {
                matched = Some((k, String::new()));
                break;
            }
            if let Some(tail) = rest.strip_prefix(&format!("{upper}_")) {
                matched = Some((k, tail.to_string()));
                break;
            }
        }
        let (key, tail) = matched.ok_or_else(|| {
            config_err(
                if trail.is_empty() { "(root)" } else { &trail },
                format!("{ENV_PREFIX}{name} does not name a known config key"),
            )
        })?;
        if !trail.is_empty() {
            trail.push('.');
        }
        trail.push_str(&key);
        if tail.is_empty() {
            let parsed = serde_json::from_str::<Value>(raw).unwrap_or(Value::String(raw.to_string()));
            obj.insert(key, parsed);
            return Ok(());
        }
        rest = tail;
        node = obj.get_mut(&key).unwrap();
    }
}

/// Parse a config document, overlaying it on the defaults and then
/// applying any `DYNAFUSE_` environment overrides from `env`.
pub fn parse_config(text: &str, env: &[(String, String)]) -> Result<RunConfig> {
    let over: Value = serde_json::from_str(text).map_err(|e| config_err("(document)", e))?;
    let mut doc = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    merge_value(&mut doc, over);
    for (name, raw) in env {
        if let Some(tail) = name.strip_prefix(ENV_PREFIX) {
            apply_override(&mut doc, tail, raw)?;
        }
    }
    serde_json::from_value(doc).map_err(|e| config_err("(document)", e))
}

pub fn env_overrides() -> Vec<(String, String)> {
    std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect()
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| DynafuseError::io(path, e))?;
    parse_config(&text, &env_overrides())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        let cfg = parse_config("{}", &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn section_values_override_defaults() {
        let cfg = parse_config(r#"{"train": {"steps": 42, "lr": 0.01}}"#, &[]).unwrap();
        assert_eq!(cfg.train.steps, 42);
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.train.seed, RunConfig::default().train.seed);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = parse_config(r#"{"train": {"stepz": 42}}"#, &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("stepz"), "{msg}");
    }

    #[test]
    fn unknown_section_is_rejected() {
        assert!(parse_config(r#"{"trian": {}}"#, &[]).is_err());
    }

    #[test]
    fn env_override_reaches_nested_keys() {
        let env = vec![
            ("DYNAFUSE_TRAIN_STEPS".to_string(), "9".to_string()),
            ("DYNAFUSE_TRAIN_CLIP_NORM".to_string(), "2.5".to_string()),
            ("DYNAFUSE_PIPELINE_FUSION_ORDER".to_string(), "\"space_channel\"".to_string()),
            ("OTHER_VAR".to_string(), "ignored".to_string()),
        ];
        let cfg = parse_config("{}", &env).unwrap();
        assert_eq!(cfg.train.steps, 9);
        assert_eq!(cfg.train.clip_norm, 2.5);
        assert_eq!(cfg.pipeline.fusion_order, FusionOrder::SpaceChannel);
    }

    #[test]
    fn env_override_unknown_key_names_the_path() {
        let env = vec![("DYNAFUSE_TRAIN_BOGUS".to_string(), "1".to_string())];
        let err = parse_config("{}", &env).unwrap_err();
        assert!(err.to_string().contains("train"), "{err}");
    }

    #[test]
    fn round_trip_is_a_fixed_point() {
        let cfg = parse_config(r#"{"eval": {"dropout": 0.5, "dropout_modality": "camera"}}"#, &[]).unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let again = parse_config(&text, &[]).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn flattening_matches_train_defaults() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.to_train_config(), TrainConfig::default());
    }

    #[test]
    fn string_env_values_do_not_need_quotes() {
        let env = vec![("DYNAFUSE_ABLATION_TABLE".to_string(), "IVh".to_string())];
        let cfg = parse_config("{}", &env).unwrap();
        assert_eq!(cfg.ablation.table, "IVh");
    }
}
