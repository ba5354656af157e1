//! Pipeline configuration, read from TOML. Every section is optional and
//! unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::centermap::CenterMapParams;
use crate::error::{Error, Result};
use crate::instancer::InstancerParams;
use crate::net::{NetConfig, S1LossParams, TrainConfig};
use crate::prm::PrmParams;
use crate::refine::RefineLossParams;
use crate::synth::SynthConfig;

/// Environment variable naming a config file when `--config` is absent.
pub const CONFIG_ENV: &str = "ZSEG_CONFIG";

/// Artifact locations, relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub centermaps: PathBuf,
    pub pseudo_labels: PathBuf,
    pub models: PathBuf,
    pub predictions: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            centermaps: "centermaps".into(),
            pseudo_labels: "pseudo_labels".into(),
            models: "models".into(),
            predictions: "predictions".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Overrides the seed of every stochastic stage when set.
    pub seed: Option<u64>,
    pub paths: PathsConfig,
    pub centermap: CenterMapParams,
    pub net: NetConfig,
    pub s1_loss: S1LossParams,
    pub train_s1: TrainConfig,
    pub prm: PrmParams,
    pub refine: RefineLossParams,
    pub train_s2: TrainConfig,
    pub instancer: InstancerParams,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: None,
            paths: PathsConfig::default(),
            centermap: CenterMapParams::default(),
            net: NetConfig::default(),
            s1_loss: S1LossParams::default(),
            train_s1: TrainConfig::default(),
            prm: PrmParams::default(),
            refine: RefineLossParams::default(),
            train_s2: TrainConfig::default(),
            instancer: InstancerParams::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| toml_error(text, e))?;
        if let Some(seed) = cfg.seed {
            cfg.set_seed(seed);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        Self::from_toml(&text)
    }

    /// Loads `path`, else the file named by [`CONFIG_ENV`], else defaults.
    pub fn resolve(path: Option<&Path>) -> Result<Self> {
        if let Some(p) = path {
            return Self::load(p);
        }
        match std::env::var_os(CONFIG_ENV) {
            Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
            _ => Ok(Self::default()),
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.synth.seed = seed;
        self.train_s1.seed = seed;
        self.train_s2.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.centermap.validate()?;
        self.net.validate()?;
        self.s1_loss.validate()?;
        self.train_s1.validate("train_s1")?;
        self.prm.validate()?;
        self.refine.validate()?;
        self.train_s2.validate("train_s2")?;
        self.instancer.validate()?;
        self.synth.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Maps a TOML error onto the section and key it concerns.
fn toml_error(text: &str, e: toml::de::Error) -> Error {
    let message = e.message().trim().to_string();
    let quoted = message.split('`').nth(1).map(str::to_string);
    let (mut section, mut key) = ("config".to_string(), quoted.clone().unwrap_or_default());
    if let Some(span) = e.span() {
        let before = &text[..span.start.min(text.len())];
        if let Some(header) = before.lines().rev().map(str::trim).find(|l| l.starts_with('[')) {
            section = header.trim_matches(|c| c == '[' || c == ']').trim().to_string();
        }
        let line_start = before.rfind('\n').map_or(0, |i| i + 1);
        let line = text[line_start..].lines().next().unwrap_or("");
        if quoted.is_none() {
            if let Some((k, _)) = line.split_once('=') {
                key = k.trim().to_string();
            }
        }
    }
    Error::Config { section, key, message }
}
