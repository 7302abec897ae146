//! Run configuration: one JSON document with `model`, `train`, `data` and
//! `output` sections, plus dotted-path overrides.
//!
//! `model.preset` (`toy` or `full`) supplies every model field; any other
//! keys given in `model` replace the preset's values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Preset};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub per_class: usize,
    /// Extra samples per class generated for the held-out split.
    pub holdout_per_class: usize,
    pub difficulty: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { num_classes: 4, per_class: 32, holdout_per_class: 8, difficulty: 0.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset bundle directory; synthetic data is generated when absent.
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
}

impl DataConfig {
    /// Training set and optional evaluation set, sized for `model`.
    pub fn load(&self, model: &ModelConfig) -> Result<(Dataset, Option<Dataset>)> {
        let (train, eval) = match &self.train {
            Some(path) => {
                let train = data::load_dataset(path)?;
                let eval = self.eval.as_deref().map(data::load_dataset).transpose()?;
                (train, eval)
            }
            None => {
                let s = &self.synthetic;
                let all = data::generate_synthetic(
                    s.num_classes,
                    s.per_class + s.holdout_per_class,
                    model.input_size,
                    model.input_size,
                    s.seed,
                    s.difficulty,
                )?;
                if s.holdout_per_class == 0 {
                    (all, None)
                } else {
                    let (train, eval) = data::holdout_split(&all, s.holdout_per_class)?;
                    (train, Some(eval))
                }
            }
        };
        for ds in std::iter::once(&train).chain(&eval) {
            if ds.num_classes() != model.num_classes {
                return Err(Error::Config(format!(
                    "dataset has {} classes but model.num_classes is {}",
                    ds.num_classes(),
                    model.num_classes
                )));
            }
        }
        Ok((train, eval))
    }
}

/// Settings used only by the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Epochs per variant; the grid is meant to be a short run.
    pub epochs: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { epochs: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            ablation: AblationConfig::default(),
            output: default_output(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    /// Resolves the model preset, deserializes and validates.
    pub fn from_value(mut v: Value) -> Result<Self> {
        let root = v.as_object_mut().ok_or_else(|| config_err("config must be a JSON object"))?;
        let user = match root.remove("model") {
            None => Map::new(),
            Some(Value::Object(m)) => m,
            Some(_) => return Err(config_err("`model` must be an object")),
        };
        let preset: Preset = match user.get("preset") {
            None => Preset::Toy,
            Some(p) => serde_json::from_value(p.clone()).map_err(|e| config_err(format!("model.preset: {e}")))?,
        };
        let mut model = serde_json::to_value(ModelConfig::preset(preset))?;
        let slot = model.as_object_mut().expect("struct serializes to an object");
        slot.extend(user);
        root.insert("model".into(), model);
        let cfg: RunConfig = serde_json::from_value(v).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_value(serde_json::from_str(text).map_err(config_err)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let s = &self.data.synthetic;
        if self.data.train.is_none() && s.num_classes != self.model.num_classes {
            return Err(config_err(format!(
                "data.synthetic.num_classes ({}) differs from model.num_classes ({})",
                s.num_classes, self.model.num_classes
            )));
        }
        if self.data.train.is_none() && (s.num_classes < 2 || s.per_class == 0) {
            return Err(config_err("synthetic data needs at least 2 classes and 1 sample per class"));
        }
        if self.ablation.epochs == 0 {
            return Err(config_err("ablation.epochs must be at least 1"));
        }
        if !(s.difficulty >= 0.0 && s.difficulty.is_finite()) {
            return Err(config_err(format!("data.synthetic.difficulty must be non-negative, got {}", s.difficulty)));
        }
        Ok(())
    }
}

/// Reads a config file (or starts from `{}`), applies `key.path=value`
/// overrides, and resolves it.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut v = match path {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| config_err(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Map::new()),
    };
    for o in overrides {
        apply_override(&mut v, o)?;
    }
    RunConfig::from_value(v)
}

/// Sets `a.b.c=value` in a JSON tree. The value is parsed as JSON when it
/// can be, and taken as a string otherwise.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| config_err(format!("override {spec:?} is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config_err(format!("override {spec:?} has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        let obj =
            node.as_object_mut().ok_or_else(|| config_err(format!("{} is not an object", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("keys is non-empty")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AttentionBlock;

    #[test]
    fn preset_merge_and_overrides() {
        let mut v: Value = serde_json::from_str(r#"{"model": {"preset": "toy", "use_sppf": false}}"#).unwrap();
        apply_override(&mut v, "train.lr=0.05").unwrap();
        apply_override(&mut v, "model.attention_block=C2PSA").unwrap();
        let c = RunConfig::from_value(v).unwrap();
        assert!(!c.model.use_sppf);
        assert_eq!(c.model.stage_widths, ModelConfig::toy().stage_widths);
        assert_eq!(c.model.attention_block, AttentionBlock::C2psa);
        assert_eq!(c.train.lr, 0.05);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"model": {"widths": [1]}}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"trian": {}}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"train": {"lr": -1}}"#), Err(Error::Config(_))));
    }

    #[test]
    fn round_trips_through_json() {
        let c = RunConfig::default();
        let back = RunConfig::from_value(serde_json::to_value(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
