//! Run configuration files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use actsched::mine::{MineConfig, StudyOptions};
use actsched::schedule::io::read_text;
use actsched::schedule::Split;
use actsched::{Error, ModelConfig, ModelKind, Result, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub schedules: PathBuf,
    pub labels: PathBuf,
    /// Activity manifest; inferred from the data when absent.
    #[serde(default)]
    pub vocab: Option<PathBuf>,
    pub out: PathBuf,
}

/// Model kind plus any fields overriding that kind's defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub kind: ModelKind,
    #[serde(flatten)]
    pub overrides: BTreeMap<String, toml::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Split whose labels condition generation and whose schedules are the reference.
    pub split: Split,
    pub samples_per_label: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            samples_per_label: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Source {
    pub tag: String,
    pub schedules: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// Share of the input samples kept before splitting.
    pub sample_frac: f64,
    /// Label variables to keep, in order; all when absent.
    pub labels: Option<Vec<String>>,
    /// `variable,category,prob` override applied to the generation labels.
    pub label_dist: Option<PathBuf>,
    /// Tag for the primary data; setting it or listing extra sources adds a source label.
    pub source_tag: Option<String>,
    pub extra_sources: Vec<Source>,
    pub source_label: String,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            sample_frac: 1.0,
            labels: None,
            label_dist: None,
            source_tag: None,
            extra_sources: Vec::new(),
            source_label: "source".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiSection {
    pub mine: MineConfig,
    pub study: StudyOptions,
}

impl Default for MiSection {
    fn default() -> Self {
        Self {
            mine: MineConfig::default(),
            study: StudyOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed: data split, initialisation, training order and generation.
    #[serde(default)]
    pub seed: u64,
    pub paths: Paths,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub mi: MiSection,
}

fn parse_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        msg: e.to_string().replace('\n', " "),
    }
}

impl RunConfig {
    /// Parses a config and makes its relative paths relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(&read_text(path)?).map_err(|e| parse_err(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.rebase(base);
        cfg.model_config()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| parse_err(Path::new("<config>"), e))?;
        cfg.model_config()?;
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.schedules);
        fix(&mut self.paths.labels);
        fix(&mut self.paths.out);
        if let Some(v) = self.paths.vocab.as_mut() {
            fix(v);
        }
        if let Some(d) = self.scenario.label_dist.as_mut() {
            fix(d);
        }
        for s in &mut self.scenario.extra_sources {
            fix(&mut s.schedules);
            fix(&mut s.labels);
        }
    }

    /// Defaults for the kind with the configured overrides applied.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let kind = self.model.kind;
        let base = toml::Value::try_from(ModelConfig::defaults(kind)).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let toml::Value::Table(mut table) = base else {
            unreachable!("struct serializes to a table")
        };
        for (k, v) in &self.model.overrides {
            if !table.contains_key(k) {
                return Err(Error::InvalidConfig(format!("unknown model field `{k}`")));
            }
            table.insert(k.clone(), v.clone());
        }
        let cfg: ModelConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string().replace('\n', " ")))?;
        cfg.validate(kind)?;
        Ok(cfg)
    }

    /// Training settings with the run seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// SHA-256 over the resolved configuration.
    pub fn hash(&self) -> Result<String> {
        let resolved = serde_json::json!({
            "run": self,
            "model": self.model_config()?,
        });
        Ok(hex::encode(Sha256::digest(resolved.to_string().as_bytes())))
    }
}
