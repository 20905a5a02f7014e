//! One JSON document configures a whole run; `key.path=value` overrides
//! are applied on top before it is parsed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::inference::EvalConfig;
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::postprocess::PostprocessConfig;
use crate::train::{SadConfig, TrainConfig, TrainSetup};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub synth: SynthConfig,
    pub train_count: usize,
    pub val_count: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_dir: None,
            val_dir: None,
            synth: SynthConfig::default(),
            train_count: 500,
            val_count: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sad: SadConfig,
    pub loss: LossWeights,
    pub data: DataConfig,
    pub postprocess: PostprocessConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Parses `text` after applying `overrides` (`dotted.key=value`, the
    /// value read as JSON and otherwise taken as a string).
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut v: Value = if text.trim().is_empty() {
            Value::Object(Map::new())
        } else {
            serde_json::from_str(text)?
        };
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(v)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (defaults only when `None`).
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_json(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        m.validate()?;
        if m.num_classes != m.lane_slots + 1 {
            return Err(Error::invalid(format!(
                "num_classes {} must equal lane_slots {} + 1",
                m.num_classes, m.lane_slots
            )));
        }
        let s = &self.data.synth;
        if (s.height, s.width, s.slots) != (m.input_h, m.input_w, m.lane_slots) {
            return Err(Error::invalid(format!(
                "synthetic scenes are {}x{} with {} slots but the model expects {}x{} with {}",
                s.height, s.width, s.slots, m.input_h, m.input_w, m.lane_slots
            )));
        }
        self.setup().validate(m)
    }

    pub fn setup(&self) -> TrainSetup {
        TrainSetup {
            train: self.train.clone(),
            sad: self.sad.clone(),
            loss: self.loss,
            postprocess: self.postprocess.clone(),
            eval: self.eval.clone(),
        }
    }
}

/// Sets `key.path=value` inside `root`, creating objects on the way.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("override `{spec}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::invalid(format!("bad override key `{key}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for (i, p) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(m) => m,
            _ => {
                return Err(Error::invalid(format!(
                    "override `{key}`: `{}` is not an object",
                    parts[..i].join(".")
                )))
            }
        };
        if i + 1 == parts.len() {
            obj.insert(p.to_string(), value);
            return Ok(());
        }
        node = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("split yields at least one part")
}
