//! `key = value` config files and `--set` overrides.
//!
//! Blank lines and `#` comments are ignored. A `profile` key (`desk` or
//! `paper`) picks the starting point wherever it appears; other keys apply
//! in file order, then overrides apply in command-line order.

use std::fs;
use std::path::Path;

use beat_core::config::TrainConfig;
use beat_core::BeatError;

use crate::error::{CliError, CliResult};

pub fn split_assignment(s: &str) -> Result<(&str, &str), BeatError> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| BeatError::Config(format!("expected key=value, got '{s}'")))
}

pub fn apply_pairs(pairs: &[(String, String)], overrides: &[String]) -> Result<TrainConfig, BeatError> {
    let profile = pairs.iter().rev().find(|(k, _)| k == "profile").map_or("desk", |(_, v)| v.as_str());
    let mut cfg = TrainConfig::profile(profile)?;
    for (k, v) in pairs.iter().filter(|(k, _)| k != "profile") {
        cfg.set(k, v)?;
    }
    for o in overrides {
        let (k, v) = split_assignment(o)?;
        if k == "profile" {
            return Err(BeatError::Config("profile can only be chosen in the config file".into()));
        }
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

pub fn read_pairs(path: &Path) -> CliResult<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = split_assignment(line).map_err(|e| BeatError::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        pairs.push((k.to_string(), v.to_string()));
    }
    Ok(pairs)
}

/// Config from an optional file plus overrides, validated.
pub fn load_config(file: Option<&Path>, overrides: &[String]) -> CliResult<TrainConfig> {
    let pairs = match file {
        Some(p) => read_pairs(p)?,
        None => Vec::new(),
    };
    let cfg = apply_pairs(&pairs, overrides)?;
    cfg.validate()?;
    Ok(cfg)
}
