//! TOML run configuration. Unknown keys are rejected and every violation is
//! reported at once.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::LossConfig;
use crate::train::{OptimizerConfig, Schedule, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub manifest: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Checkpoint to continue from.
    #[serde(default)]
    pub resume: Option<PathBuf>,
}

/// Optional `[exec]` section.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExecSection {
    /// `"parallel"` or `"sequential"`.
    pub policy: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub output: OutputSection,
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub train: Schedule,
    #[serde(default)]
    pub exec: ExecSection,
}

impl RunConfig {
    /// Parses and validates. Relative paths are resolved against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        for p in [&mut cfg.data.manifest, &mut cfg.output.dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(r) = cfg.output.resume.as_mut().filter(|r| r.is_relative()) {
            *r = base.join(&*r);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("cannot read config {}: {e}", path.display())]))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model.clone(),
            loss: self.loss.clone(),
            optimizer: self.optimizer.clone(),
            train: self.train.clone(),
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = self.train_config().violations();
        if !self.data.manifest.is_file() {
            v.push(format!("data.manifest: file not found: {}", self.data.manifest.display()));
        }
        if let Some(r) = &self.output.resume {
            if !r.is_file() {
                v.push(format!("output.resume: file not found: {}", r.display()));
            }
        }
        if let Some(p) = &self.exec.policy {
            if let Err(e) = p.parse::<crate::Exec>() {
                v.push(format!("exec.policy: {e}"));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}
