use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use logfrag_core::io::write_json;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::Config;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one run. Re-running with `config_echo` and `seed` reproduces
/// every numeric artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub config_echo: BTreeMap<String, Value>,
    pub seed: u64,
    /// UTC, ISO-8601.
    pub timestamp: String,
    /// Relative to the run directory.
    pub artifact_paths: Vec<String>,
    pub version: String,
    pub threads: usize,
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, cfg: &Config, files: &[PathBuf]) -> Self {
        Self {
            command: command.into(),
            config_path: config_path.map(|p| p.display().to_string()),
            config_echo: cfg.echo(),
            seed: cfg.optimizer.seed,
            timestamp: Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true),
            artifact_paths: files.iter().map(|p| p.display().to_string()).collect(),
            version: concat!("logfrag ", env!("CARGO_PKG_VERSION")).into(),
            threads: rayon::current_num_threads(),
        }
    }

    pub fn write(&self, dir: &Path) -> logfrag_core::Result<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }
}
