use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::SamplerConfig;
use crate::detector::{AdaptationConfig, DetectorConfig, DyConvConfig, ModelConfig, QueriesConfig};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::taxonomy::EmbedderSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fractions of the step budget at which the learning rate is multiplied by `gamma`.
    pub milestones: Vec<f64>,
    pub gamma: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            milestones: vec![0.78, 0.93],
            gamma: 0.1,
            grad_clip: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    /// Seeds parameter initialization.
    pub seed: u64,
    /// Keeps data order fixed and single-threaded.
    pub deterministic: bool,
    pub metrics_every: usize,
    pub precision: Precision,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 2,
            seed: 0,
            deterministic: true,
            metrics_every: 10,
            precision: Precision::F32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Evaluates at most this many images per dataset; 0 means all.
    pub max_images: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { max_images: 0 }
    }
}

/// One training dataset: a directory with `annotations.json` and `images/`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub name: String,
    pub path: PathBuf,
}

/// Complete, serializable description of a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub queries: QueriesConfig,
    pub dyconv: DyConvConfig,
    pub adaptation: AdaptationConfig,
    pub optimizer: OptimizerConfig,
    pub train: TrainSection,
    pub sampler: SamplerConfig,
    pub loss: LossWeights,
    pub embedder: EmbedderSpec,
    pub eval: EvalSection,
    pub datasets: Vec<DatasetEntry>,
}

impl TrainConfig {
    pub fn detector(&self) -> DetectorConfig {
        DetectorConfig {
            model: self.model.clone(),
            queries: self.queries.clone(),
            dyconv: self.dyconv.clone(),
            adaptation: self.adaptation.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.detector().validate()?;
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::config("optimizer.lr must be positive"));
        }
        if o.weight_decay < 0.0 || o.grad_clip < 0.0 {
            return Err(Error::config("optimizer.weight_decay and grad_clip must be non-negative"));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 {
            return Err(Error::config("optimizer betas must lie in [0, 1) and eps be positive"));
        }
        if o.milestones.iter().any(|m| !(*m > 0.0 && *m < 1.0))
            || o.milestones.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::config(format!(
                "optimizer.milestones must be ascending fractions in (0, 1), got {:?}",
                o.milestones
            )));
        }
        if !(o.gamma > 0.0) {
            return Err(Error::config("optimizer.gamma must be positive"));
        }
        let t = &self.train;
        if t.steps == 0 || t.batch_size == 0 || t.metrics_every == 0 {
            return Err(Error::config(
                "train.steps, train.batch_size and train.metrics_every must be positive",
            ));
        }
        let l = &self.loss;
        let weights = [l.lambda_cls, l.lambda_l1, l.lambda_giou, l.lambda_align, l.focal_gamma];
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::config("loss weights and loss.focal_gamma must be finite and non-negative"));
        }
        let s = &self.sampler;
        if !(s.rebalance_threshold > 0.0 && s.rebalance_threshold < 1.0) {
            return Err(Error::config("sampler.rebalance_threshold must be in (0, 1)"));
        }
        let mut names: Vec<&str> = self.datasets.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("dataset names must be unique"));
        }
        Ok(())
    }

    /// Parses a TOML document; absent keys take their defaults, unknown keys fail.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Applies `key=value` overrides. Values are parsed as TOML literals, falling
    /// back to a bare string; keys must name an existing setting.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        let known = config_keys();
        for raw in overrides {
            let raw = raw.as_ref();
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override `{raw}` is not key=value")))?;
            let key = key.trim();
            if !known.iter().any(|k| k.key == key) {
                return Err(Error::config(format!("unknown config key `{key}`")));
            }
            set_path(&mut tree, key, parse_value(value.trim())?)?;
        }
        serde_json::from_value(tree).map_err(|e| Error::config(format!("bad override: {e}")))
    }

    /// Stable hash of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_string(&serde_json::to_value(self)?)?;
        Ok(hex::encode(Sha256::digest(json.as_bytes())))
    }
}

fn parse_value(text: &str) -> Result<Value> {
    #[derive(Deserialize)]
    struct Wrapper {
        v: toml::Value,
    }
    match toml::from_str::<Wrapper>(&format!("v = {text}")) {
        Ok(w) => Ok(serde_json::to_value(w.v)?),
        Err(_) => Ok(Value::String(text.to_string())),
    }
}

fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        node = node
            .get_mut(*part)
            .ok_or_else(|| Error::config(format!("unknown config key `{key}`")))?;
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| Error::config(format!("`{key}` does not name a setting")))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// One configurable setting with its default rendered as TOML.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigKey {
    pub key: String,
    pub default: String,
}

/// Every dotted config key with its default, derived from [`TrainConfig::default`].
pub fn config_keys() -> Vec<ConfigKey> {
    let tree = serde_json::to_value(TrainConfig::default()).expect("default config serializes");
    let mut out = Vec::new();
    flatten(&tree, String::new(), &mut out);
    out
}

fn flatten(v: &Value, prefix: String, out: &mut Vec<ConfigKey>) {
    match v {
        Value::Object(map) if !map.is_empty() || prefix.is_empty() => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(child, key, out);
            }
        }
        other => out.push(ConfigKey {
            key: prefix,
            default: match other {
                Value::Null => "(unset)".to_string(),
                Value::String(s) => format!("\"{s}\""),
                v => v.to_string(),
            },
        }),
    }
}

/// Multi-line listing of [`config_keys`] for help output.
pub fn config_key_help() -> String {
    let keys = config_keys();
    let width = keys.iter().map(|k| k.key.len()).max().unwrap_or(0);
    keys.iter()
        .map(|k| format!("  {:width$}  {}", k.key, k.default))
        .collect::<Vec<_>>()
        .join("\n")
}
