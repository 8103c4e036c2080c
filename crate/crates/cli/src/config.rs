//! Run configuration: a JSON file (nested or with flat dotted keys) plus
//! `key=value` overrides, resolved into a [`RunSpec`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndbench::datapipe::{DriftConfig, PrepConfig};
use ndbench::harness::TrainConfig;
use ndbench::metrics::BenchConfig;
use ndbench::{ModelConfig, ModelKind};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{usage, CliError};

pub const MANIFEST_FORMAT: &str = "ndbench-run-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    /// `single` or `multi` for the train command.
    pub experiment: Experiment,
    pub data: DataSection,
    pub out: OutSection,
    pub synth: SynthSection,
    pub prep: PrepConfig,
    pub model: ModelSection,
    /// Overrides applied on top of the experiment's default training config.
    pub train: Map<String, Value>,
    pub finetune: FinetuneSection,
    pub scale: ScaleSection,
    pub bench: BenchSection,
    pub report: ReportSection,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            experiment: Experiment::Single,
            data: DataSection::default(),
            out: OutSection::default(),
            synth: SynthSection::default(),
            prep: PrepConfig::default(),
            model: ModelSection::default(),
            train: Map::new(),
            finetune: FinetuneSection::default(),
            scale: ScaleSection::default(),
            bench: BenchSection::default(),
            report: ReportSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Single,
    Multi,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory of session bundles; defaults to `<out.dir>/sessions`.
    pub dir: Option<PathBuf>,
    /// Session ids to use; empty means all.
    pub sessions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutSection {
    pub dir: PathBuf,
}

impl Default for OutSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("ndbench-out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub days: usize,
    pub channels: usize,
    pub duration_s: f64,
    pub seed: u64,
    pub poisson_noise: bool,
    pub drift: DriftConfig,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            days: 1,
            channels: 96,
            duration_s: 300.0,
            seed: 0,
            poisson_noise: true,
            drift: DriftConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Reference sizes.
    #[default]
    Reference,
    /// One layer, width 32; minutes on a laptop CPU.
    Small,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Kinds {
    One(ModelKind),
    Many(Vec<ModelKind>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub kind: Kinds,
    pub preset: Preset,
    /// Any other [`ModelConfig`] field.
    #[serde(flatten)]
    pub overrides: Map<String, Value>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: Kinds::One(ModelKind::Gru),
            preset: Preset::Reference,
            overrides: Map::new(),
        }
    }
}

impl ModelSection {
    pub fn kinds(&self) -> Vec<ModelKind> {
        match &self.kind {
            Kinds::One(k) => vec![*k],
            Kinds::Many(v) => v.clone(),
        }
    }

    pub fn resolve(&self, kind: ModelKind, channels: usize) -> Result<ModelConfig, CliError> {
        let base = match self.preset {
            Preset::Reference => ModelConfig::default_for(kind, channels),
            Preset::Small => ModelConfig {
                max_timesteps: 1024,
                ..ModelConfig::tiny(kind, channels, 32)
            },
        };
        let mut value = serde_json::to_value(base)?;
        let obj = value.as_object_mut().expect("config serializes to an object");
        for (k, v) in &self.overrides {
            if k == "input_channels" {
                return usage("model.input_channels is taken from the data");
            }
            if !obj.contains_key(k) {
                return usage(format!("unknown model key model.{k}"));
            }
            obj.insert(k.clone(), v.clone());
        }
        let cfg: ModelConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    /// Checkpoint to start from.
    pub base: Option<PathBuf>,
    /// New session id; defaults to the latest session.
    pub session: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScaleSection {
    pub layer_counts: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for ScaleSection {
    fn default() -> Self {
        Self {
            layer_counts: vec![1, 2, 4],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub checkpoints: Vec<PathBuf>,
    pub lengths: Vec<usize>,
    pub warmup: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Default for BenchSection {
    fn default() -> Self {
        let d = BenchConfig::default();
        Self {
            checkpoints: Vec::new(),
            lengths: vec![128, 1024],
            warmup: d.warmup,
            samples: d.samples,
            seed: d.seed,
        }
    }
}

impl BenchSection {
    pub fn config(&self) -> BenchConfig {
        BenchConfig {
            warmup: self.warmup,
            samples: self.samples,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// Metrics/latency CSV files or directories holding them; defaults to
    /// `out.dir`.
    pub inputs: Vec<PathBuf>,
}

impl RunSpec {
    pub fn data_dir(&self) -> PathBuf {
        self.data.dir.clone().unwrap_or_else(|| self.out.dir.join("sessions"))
    }

    /// Training config for `experiment` with the `train.*` overrides applied.
    pub fn train_config(&self, experiment: Experiment) -> Result<TrainConfig, CliError> {
        let base = match experiment {
            Experiment::Single => TrainConfig::single_session(),
            Experiment::Multi => TrainConfig::multi_session(),
        };
        let mut value = serde_json::to_value(base)?;
        let obj = value.as_object_mut().expect("config serializes to an object");
        for (k, v) in &self.train {
            obj.insert(k.clone(), v.clone());
        }
        let cfg: TrainConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A config file plus the hashes recorded in it when it is a run manifest.
pub struct Loaded {
    pub spec: RunSpec,
    pub expected_hashes: Option<BTreeMap<String, String>>,
}

pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Loaded, CliError> {
    let mut root = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(CliError::io(p))?;
            serde_json::from_str::<Value>(&text)?
        }
        None => Value::Object(Map::new()),
    };
    let mut expected_hashes = None;
    if root.get("format").and_then(Value::as_str) == Some(MANIFEST_FORMAT) {
        expected_hashes = Some(serde_json::from_value(root["data_hashes"].take())?);
        root = root["spec"].take();
    }
    let Value::Object(obj) = root else {
        return usage("config must be a JSON object");
    };
    let mut flat = BTreeMap::new();
    flatten("", Value::Object(obj), &mut flat);
    for o in overrides {
        let Some((k, v)) = o.split_once('=') else {
            return usage(format!("override {o:?} is not key=value"));
        };
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        flat.insert(k.trim().to_string(), value);
    }
    let spec = serde_json::from_value(unflatten(flat)?)?;
    Ok(Loaded { spec, expected_hashes })
}

fn flatten(prefix: &str, v: Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) if !m.is_empty() || prefix.is_empty() => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other);
        }
    }
}

fn unflatten(flat: BTreeMap<String, Value>) -> Result<Value, CliError> {
    let mut root = Map::new();
    for (key, value) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return usage(format!("malformed key {key:?}"));
        }
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            let entry = node.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
            node = match entry {
                Value::Object(m) => m,
                _ => return usage(format!("key {key:?} conflicts with a value at {p:?}")),
            };
        }
        node.insert(parts[parts.len() - 1].to_string(), value);
    }
    Ok(Value::Object(root))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_and_nested_keys_agree() {
        let dir = tempfile::tempdir().unwrap();
        let flat = dir.path().join("flat.json");
        let nested = dir.path().join("nested.json");
        fs::write(&flat, r#"{"train.epochs": 3, "model.kind": "rwkv", "synth.drift.rate_decay": 0.5}"#).unwrap();
        fs::write(&nested, r#"{"train": {"epochs": 3}, "model": {"kind": "rwkv"}, "synth": {"drift": {"rate_decay": 0.5}}}"#)
            .unwrap();
        let a = load(Some(&flat), &[]).unwrap().spec;
        let b = load(Some(&nested), &[]).unwrap().spec;
        assert_eq!(a, b);
        assert_eq!(a.synth.drift.rate_decay, 0.5);
        assert_eq!(a.model.kinds(), [ModelKind::Rwkv]);
    }

    #[test]
    fn overrides_win_and_parse_json() {
        let spec = load(None, &["train.epochs=7".into(), "model.kind=[\"gru\",\"mamba\"]".into(), "model.embed=16".into()])
            .unwrap()
            .spec;
        assert_eq!(spec.train_config(Experiment::Single).unwrap().epochs, 7);
        assert_eq!(spec.model.kinds(), [ModelKind::Gru, ModelKind::Mamba]);
        assert_eq!(spec.model.resolve(ModelKind::Mamba, 8).unwrap().embed, 16);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(load(None, &["train.epoch=3".into()]).unwrap().spec.train_config(Experiment::Single).is_err());
        assert!(load(None, &["synth.dayz=3".into()]).is_err());
        let spec = load(None, &["model.width=3".into()]).unwrap().spec;
        assert!(spec.model.resolve(ModelKind::Gru, 4).is_err());
        assert!(load(None, &["noequals".into()]).is_err());
    }

    #[test]
    fn experiment_picks_the_training_defaults() {
        let spec = RunSpec::default();
        assert_eq!(spec.train_config(Experiment::Single).unwrap().steps, 128);
        assert_eq!(spec.train_config(Experiment::Multi).unwrap().steps, 1024);
    }
}
