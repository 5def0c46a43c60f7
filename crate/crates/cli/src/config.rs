use std::path::{Path, PathBuf};

use anyhow::Context;
use kdgat::model::{config_hash, ArchConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// Everything that shapes a run's results. Paths are not part of the hashed
/// configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub teacher: ArchConfig,
    pub student: ArchConfig,
    #[serde(skip_serializing)]
    pub data_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            teacher: ArchConfig::teacher(),
            student: ArchConfig::student(),
            data_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("config {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.train.validate()?;
        self.teacher.validate().context("[teacher]")?;
        self.student.validate().context("[student]")?;
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// `config_hash=…` and `config=<json>` lines for artifact preambles.
    pub fn preamble(&self) -> String {
        format!("config_hash={}\nconfig={}", self.hash(), self.to_json())
    }
}
