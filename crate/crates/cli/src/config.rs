use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sicql::config::EngineConfig;
use sicql::model::{FakeModel, FakeScript, HttpConfig, HttpModel, Model};
use sicql::physical::Profile;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    /// Scripted offline model.
    Fake {
        #[serde(default)]
        script: Option<PathBuf>,
    },
    Http(HttpConfig),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Fake { script: None }
    }
}

impl ModelConfig {
    pub fn build(&self) -> anyhow::Result<Box<dyn Model>> {
        Ok(match self {
            ModelConfig::Fake { script: Some(p) } => {
                Box::new(FakeModel::from_path(p).with_context(|| format!("loading model script {}", p.display()))?)
            }
            ModelConfig::Fake { script: None } => Box::new(FakeModel::new(FakeScript::default())?),
            ModelConfig::Http(c) => Box::new(HttpModel::new(c.clone())),
        })
    }
}

fn default_run_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_store() -> PathBuf {
    PathBuf::from("constraints.jsonl")
}

fn default_port() -> u16 {
    8080
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub profile: Option<PathBuf>,
    #[serde(default = "default_run_dir")]
    pub run_dir: PathBuf,
    /// Constraint store file.
    #[serde(default = "default_store")]
    pub store: PathBuf,
    #[serde(default = "default_port")]
    pub port: u16,
    #[serde(default)]
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Config> {
        let Some(path) = path else { return Ok(Config::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn profile(&self) -> anyhow::Result<Profile> {
        let Some(path) = &self.profile else { return Ok(Profile::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading profile {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("invalid profile {}", path.display()))
    }
}
