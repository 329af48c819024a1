use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::AnalysisConfig;
use crate::data::SyntheticConfig;
use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricsConfig;
use crate::model::ModelConfig;
use crate::training::{Objective, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_personas: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_categories: usize,
    pub seed: u64,
    /// Import these JSONL files instead of generating a synthetic corpus.
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SyntheticConfig::default();
        DataConfig {
            n_personas: s.n_personas,
            n_train: s.n_train,
            n_test: s.n_test,
            n_categories: s.n_categories,
            seed: s.seed,
            train_path: None,
            test_path: None,
        }
    }
}

impl DataConfig {
    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            n_personas: self.n_personas,
            n_train: self.n_train,
            n_test: self.n_test,
            n_categories: self.n_categories,
            seed: self.seed,
        }
    }
}

/// Everything a run needs, as one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Names checkpoints, decodes and reports; defaults to the objective.
    #[serde(default)]
    pub run_name: Option<String>,
    /// Checkpoint to analyse; defaults to this run's own `model.orgc`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            metrics: MetricsConfig::default(),
            analysis: AnalysisConfig::default(),
            output_dir: default_output_dir(),
            run_name: None,
            checkpoint: None,
        }
    }
}

impl RunConfig {
    /// Loads `file` (if any), applies `key=value` overrides in order and
    /// validates. Values are parsed as JSON, falling back to a plain string.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let defaults = serde_json::to_value(RunConfig::default())?;
        let mut doc = match file {
            Some(path) => {
                if !path.exists() {
                    return Err(Error::MissingInput(path.to_path_buf()));
                }
                let doc: Value = serde_json::from_str(&std::fs::read_to_string(path)?)
                    .map_err(|e| Error::config("<config>", format!("{}: {e}", path.display())))?;
                let Value::Object(map) = &doc else {
                    return Err(Error::config("<config>", "the config file must hold a JSON object"));
                };
                if !map.contains_key("version") {
                    return Err(Error::config("version", "missing mandatory field"));
                }
                check_known(&doc, &defaults, "")?;
                doc
            }
            None => defaults.clone(),
        };
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o.as_str(), "overrides take the form dotted.key=value"))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, &defaults, key, value)?;
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(&doc).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<config>".to_string() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config("version", format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version)));
        }
        if self.data.train_path.is_none() {
            self.data.synthetic().validate()?;
        }
        if self.model.vocab_size != 0 {
            self.model.validate()?;
        }
        self.train.validate()?;
        self.decode.validate()?;
        self.analysis.validate()?;
        if self.data.train_path.is_some() != self.data.test_path.is_some() {
            return Err(Error::config("data.test_path", "train_path and test_path must be given together"));
        }
        Ok(())
    }

    pub fn tag(&self) -> String {
        self.run_name.clone().unwrap_or_else(|| {
            match self.train.objective {
                Objective::Mle => "mle",
                Objective::Orig => "orig",
            }
            .to_string()
        })
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.output_dir.join("checkpoints").join(self.tag()).join("model.orgc"))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        super::sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

/// Rejects any key of `doc` that the default config does not have. Subtrees
/// whose default is `null` are left to the deserializer.
fn check_known(doc: &Value, defaults: &Value, prefix: &str) -> Result<()> {
    if let (Value::Object(d), Value::Object(t)) = (doc, defaults) {
        for (k, v) in d {
            let path = join(prefix, k);
            match t.get(k) {
                None => return Err(Error::config(path, "unknown key")),
                Some(def) => check_known(v, def, &path)?,
            }
        }
    }
    Ok(())
}

fn set_path(doc: &mut Value, defaults: &Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut def = Some(defaults);
    let mut node = doc;
    for (i, part) in parts.iter().enumerate() {
        let here = parts[..=i].join(".");
        def = match def {
            Some(Value::Object(m)) => match m.get(*part) {
                Some(v) => Some(v),
                None => return Err(Error::config(here, "unknown key")),
            },
            // below a null default (an unset optional section) anything goes
            _ => None,
        };
        if !node.is_object() {
            *node = Value::Object(Default::default());
        }
        let map = node.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
    Ok(())
}
