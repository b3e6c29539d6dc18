//! Run configuration with three layers: built-in defaults, a JSON config file
//! of flat dotted keys, and command-line overrides, later layers winning.

use std::collections::BTreeMap;
use std::path::PathBuf;

use macd_core::backend::BackendSpec;
use macd_core::compose::ComposeConfig;
use macd_core::decode::{DecodeConfig, Profile};
use macd_core::eval::{BootstrapConfig, ExperimentConfig, Method, SuiteSpec};
use macd_core::optimize::OptimizerConfig;
use macd_core::track::TrackerConfig;
use macd_core::video::Seed;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

/// Environment variable that replaces every default seed.
pub const SEED_ENV: &str = "MACD_SEED";

/// Pseudo-key expanding to `decode.alpha` and `decode.beta`.
const PROFILE_KEY: &str = "profile";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub path: Option<PathBuf>,
    pub format: Format,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub backend: BackendSpec,
    pub decode: DecodeConfig,
    pub tracker: TrackerConfig,
    pub optimizer: OptimizerConfig,
    pub compose: ComposeConfig,
    pub noise_sigma: f64,
    pub bootstrap: BootstrapConfig,
    pub jobs: usize,
    pub suite: SuiteSpec,
    pub output: OutputConfig,
}

impl RunConfig {
    /// Built-in defaults with every seed set to `seed`.
    pub fn defaults(seed: Seed) -> Self {
        let e = ExperimentConfig::default();
        Self {
            method: e.method,
            backend: BackendSpec::Toy { seed, biased: true },
            decode: DecodeConfig { seed, ..e.decode },
            tracker: e.tracker,
            optimizer: e.optimizer,
            compose: e.compose,
            noise_sigma: e.noise_sigma,
            bootstrap: BootstrapConfig { seed, ..e.bootstrap },
            jobs: 1,
            suite: SuiteSpec { n: 200, bias_mix: 0.5, seed },
            output: OutputConfig::default(),
        }
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            method: self.method,
            backend: self.backend.clone(),
            decode: self.decode.clone(),
            tracker: self.tracker.clone(),
            optimizer: self.optimizer.clone(),
            compose: self.compose.clone(),
            noise_sigma: self.noise_sigma,
            bootstrap: self.bootstrap,
            jobs: self.jobs,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.experiment().validate().map_err(|e| CliError::Config(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.suite.bias_mix) || self.suite.n == 0 {
            return Err(CliError::Config("suite needs n >= 1 and bias_mix in [0,1]".into()));
        }
        Ok(())
    }
}

/// Dotted leaf keys of a JSON object; arrays and nulls are leaves.
fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(part) = parts.next() {
            if parts.peek().is_none() {
                node.insert(part.to_string(), v.clone());
            } else {
                node = node
                    .entry(part.to_string())
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("leaf keys never prefix other keys");
            }
        }
    }
    Value::Object(root)
}

/// One layer of key overrides.
#[derive(Debug, Clone, Default)]
pub struct Layer {
    entries: Vec<(String, Value)>,
}

impl Layer {
    pub fn set(&mut self, key: &str, value: Value) {
        self.entries.push((key.to_string(), value));
    }

    /// Records a textual value, typed later against the key's default.
    pub fn set_text(&mut self, key: &str, text: impl Into<String>) {
        self.entries.push((key.to_string(), Value::String(text.into())));
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parses a config file body: one JSON object of dotted keys.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let v: Value = serde_json::from_str(text).map_err(|e| CliError::Config(format!("config file: {e}")))?;
        let Value::Object(map) = v else {
            return Err(CliError::Config("config file must hold a JSON object".into()));
        };
        Ok(Self { entries: map.into_iter().collect() })
    }
}

/// Converts `text` to the JSON type of the default value it replaces.
fn typed(key: &str, text: &str, default: &Value) -> Result<Value, CliError> {
    let bad = || CliError::Config(format!("invalid value '{text}' for {key}"));
    if text == "null" {
        // optional keys; required ones fail at deserialization
        return Ok(Value::Null);
    }
    Ok(match default {
        Value::Bool(_) => Value::Bool(text.parse().map_err(|_| bad())?),
        Value::Number(n) if n.is_u64() => match text.parse::<u64>() {
            Ok(u) => Value::from(u),
            // keeps negative or fractional input for typed validation to reject
            Err(_) => Value::from(text.parse::<f64>().map_err(|_| bad())?),
        },
        Value::Number(_) => Value::from(text.parse::<f64>().map_err(|_| bad())?),
        Value::Array(_) => {
            let items: Result<Vec<Value>, _> = text
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| serde_json::from_str(s.trim()).or_else(|_| Ok::<_, CliError>(Value::String(s.trim().into()))))
                .collect();
            Value::Array(items?)
        }
        Value::Null => serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.into())),
        _ => Value::String(text.into()),
    })
}

fn apply(layer: &Layer, from_text: bool, flat: &mut BTreeMap<String, Value>) -> Result<(), CliError> {
    let explicit: Vec<&str> = layer.entries.iter().map(|(k, _)| k.as_str()).collect();
    for (key, value) in &layer.entries {
        if key == PROFILE_KEY {
            let name = value.as_str().ok_or_else(|| CliError::Config("profile must be a string".into()))?;
            let profile: Profile = name.parse().map_err(CliError::Config)?;
            let (alpha, beta) = profile.alpha_beta();
            // explicit alpha/beta in the same layer win over the preset
            for (k, v) in [("decode.alpha", alpha), ("decode.beta", beta)] {
                if !explicit.contains(&k) {
                    flat.insert(k.into(), Value::from(v));
                }
            }
            continue;
        }
        let default = flat.get(key).ok_or_else(|| CliError::Config(format!("unknown config key '{key}'")))?;
        let v = match (from_text, value) {
            (true, Value::String(text)) => typed(key, text, default)?,
            _ => value.clone(),
        };
        flat.insert(key.clone(), v);
    }
    Ok(())
}

/// Resolves defaults, then `file`, then `cli`. `env_seed` replaces default seeds.
pub fn resolve(env_seed: Option<u64>, file: Option<&Layer>, cli: &Layer) -> Result<RunConfig, CliError> {
    let defaults = RunConfig::defaults(Seed(env_seed.unwrap_or(0)));
    let mut flat = BTreeMap::new();
    flatten("", &serde_json::to_value(&defaults).expect("defaults serialize"), &mut flat);
    if let Some(file) = file {
        apply(file, false, &mut flat)?;
    }
    apply(cli, true, &mut flat)?;
    let cfg: RunConfig = serde_json::from_value(unflatten(&flat)).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `MACD_SEED`, rejecting values that are not unsigned integers.
pub fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("{SEED_ENV}='{s}' is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}
