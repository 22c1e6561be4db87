//! Append-only `manifest.json` kept in every output directory.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use beat_core::config::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::report::config_digest;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub args: Vec<String>,
    pub config: TrainConfig,
    pub config_digest: String,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
}

impl RunRecord {
    pub fn new(command: &str, args: Vec<String>, config: &TrainConfig, started_unix: u64) -> Self {
        Self {
            command: command.to_string(),
            args,
            config: config.clone(),
            config_digest: config_digest(config),
            seed: config.seed,
            started_unix,
            finished_unix: started_unix,
            artifacts: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub runs: Vec<RunRecord>,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn load(dir: &Path) -> CliResult<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::format(&path, e.to_string()))
    }

    /// Adds `run` to the manifest in `dir`, keeping earlier runs untouched.
    pub fn append(dir: &Path, run: RunRecord) -> CliResult<()> {
        let mut m = Self::load(dir)?;
        m.runs.push(run);
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }
}
