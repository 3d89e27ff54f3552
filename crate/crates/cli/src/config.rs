//! Run configuration: a TOML file with `model`, `providers`, `train`, `eval`
//! and `synth` tables, then environment overrides, then command-line flags.

use std::path::{Path, PathBuf};

use mgnm::model::ModelConfig;
use mgnm::providers::ProviderConfig;
use mgnm::synth::SynthTaskSpec;
use mgnm::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const ENV_SEED: &str = "MGNM_SEED";
pub const ENV_OUT_DIR: &str = "MGNM_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Split scored by `eval`, `infer` and the end of `train`.
    pub split: String,
    /// Also write per-class PR curves into the report.
    pub pr_curves: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: "test".into(),
            pr_curves: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub providers: ProviderConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub synth: SynthTaskSpec,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// One seed for every seeded component.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.synth.seed = seed;
    }

    /// Keeps provider and model widths in step; a config that sets only
    /// one side gets the other filled in.
    pub fn sync_dims(&mut self) {
        let p = &mut self.providers;
        let m = &mut self.model;
        p.node_dim = m.node_dim;
        p.visual_dim = m.visual_dim;
        p.text_dim = m.text_dim;
        p.backbone_dim = m.backbone_dim;
        self.synth.visual_dim = m.visual_dim;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if !matches!(self.eval.split.as_str(), "train" | "test") {
            return Err(CliError::Config(format!("unknown split `{}`", self.eval.split)));
        }
        Ok(())
    }
}

/// Environment overrides, read once so tests can pass their own.
#[derive(Debug, Clone, Default)]
pub struct Env {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl Env {
    pub fn from_process() -> Result<Self, CliError> {
        let seed = match std::env::var(ENV_SEED) {
            Ok(s) => Some(
                s.trim()
                    .parse()
                    .map_err(|_| CliError::Config(format!("{ENV_SEED}={s} is not an unsigned integer")))?,
            ),
            Err(_) => None,
        };
        let out_dir = std::env::var_os(ENV_OUT_DIR).map(PathBuf::from);
        Ok(Self { seed, out_dir })
    }
}
