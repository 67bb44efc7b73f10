//! Run manifests: what a command was asked to do and a content hash of
//! what it read.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use pvsnet::config::Config;
use pvsnet::Result;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// Effective configuration as TOML, after flag overrides.
    pub config: String,
    pub seed: u64,
    /// SHA-256 over the effective configuration and every input file.
    pub input_hash: String,
    pub inputs: usize,
    pub started_unix: f64,
    pub finished_unix: f64,
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Hashes `config` and the files, in sorted order, each prefixed by its
/// path relative to the common `root` so moving a dataset keeps the hash.
pub fn input_hash(config: &str, root: Option<&Path>, files: &[PathBuf]) -> Result<String> {
    let mut sorted = files.to_vec();
    sorted.sort();
    let mut h = Sha256::new();
    h.update(config.as_bytes());
    for f in &sorted {
        let name = root.and_then(|r| f.strip_prefix(r).ok()).unwrap_or(f);
        h.update(name.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(fs::read(f)?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

impl RunManifest {
    pub fn new(command: &str, config: &Config, seed: u64, input_hash: String, inputs: usize, started_unix: f64) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            config: config.to_toml()?,
            seed,
            input_hash,
            inputs,
            started_unix,
            finished_unix: unix_now(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
