//! Run manifests: everything needed to repeat a run, plus a digest of what
//! it produced so a replay can be checked.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use mgnm::hashing::hex_digest;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::{CliError, Command};

pub const MANIFEST_FORMAT: &str = "mgnm-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

impl InputFile {
    pub fn hash(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Run(e.into()))?;
        Ok(Self {
            path: std::fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf()),
            sha256: hex_digest(&bytes),
        })
    }

    /// Fails unless the file still has the recorded contents.
    pub fn verify(&self) -> Result<(), CliError> {
        let now = Self::hash(&self.path)?;
        if now.sha256 != self.sha256 {
            return Err(CliError::Failed(format!(
                "{} changed since the run (sha256 {} != {})",
                self.path.display(),
                now.sha256,
                self.sha256
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    pub command: Command,
    pub config: Config,
    pub config_hash: String,
    pub seed: u64,
    pub git_revision: String,
    pub out: Option<PathBuf>,
    /// Base directory of relative provider file paths.
    pub base_dir: PathBuf,
    pub inputs: BTreeMap<String, InputFile>,
    pub outputs: Vec<PathBuf>,
    /// Digest of the run's deterministic result (metrics or written data).
    pub result_digest: String,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
    pub parallel: bool,
}

impl Manifest {
    pub fn new(command: Command, config: Config, out: Option<PathBuf>) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: config_hash(&config),
            seed: config.train.seed,
            git_revision: git_revision(),
            command,
            config,
            out,
            base_dir: PathBuf::from("."),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            result_digest: String::new(),
            timings: BTreeMap::new(),
            parallel: mgnm::par::is_parallel(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let body = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, body + "\n").map_err(|e| CliError::Run(e.into()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        let m: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("malformed manifest {}: {e}", path.display())))?;
        if m.format != MANIFEST_FORMAT {
            return Err(CliError::Config(format!("{} is not a manifest", path.display())));
        }
        if m.version != MANIFEST_VERSION {
            return Err(CliError::Run(mgnm::Error::Version {
                found: m.version,
                expected: MANIFEST_VERSION,
            }));
        }
        Ok(m)
    }
}

pub fn config_hash(config: &Config) -> String {
    hex_digest(serde_json::to_string(config).expect("config serializes").as_bytes())
}

/// `git rev-parse HEAD` of the working directory, or `unknown`.
pub fn git_revision() -> String {
    Process::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

/// Where the manifest of a run writing to `out` lives: inside a directory
/// output, next to a file output.
pub fn manifest_path(out: &Path, out_is_dir: bool) -> PathBuf {
    if out_is_dir {
        out.join("manifest.json")
    } else {
        let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        out.with_file_name(name)
    }
}
