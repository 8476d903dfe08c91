//! Run manifests: what was run, on which data, with which settings.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

pub const MANIFEST_NAME: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Full argument vector, enough to replay the run.
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// Dataset directory to SHA-256 of its manifest and images.
    pub dataset_hashes: BTreeMap<String, String>,
    pub tool_version: String,
    pub started_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config: serde_json::Value::Null,
            seed: None,
            dataset_hashes: BTreeMap::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: Utc::now(),
            finished_at: None,
            outputs: Vec::new(),
        }
    }

    pub fn add_dataset(&mut self, dir: &Path) -> Result<()> {
        let h = ddf_core::synth_data::dataset_hash(dir)
            .with_context(|| format!("hashing {}", dir.display()))?;
        self.dataset_hashes.insert(dir.display().to_string(), h);
        Ok(())
    }

    pub fn add_output(&mut self, p: &Path) {
        self.outputs.push(p.display().to_string());
    }

    /// Stamps the end time and writes `path` via a temporary sibling.
    pub fn finish(mut self, path: &Path) -> Result<()> {
        self.finished_at = Some(Utc::now());
        write_atomic(path, &serde_json::to_vec_pretty(&self)?)
    }
}

/// Manifest location for a run whose primary output is the file `out`.
pub fn beside_file(out: &Path) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|s| s.to_os_string())
        .unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut tmp = path.as_os_str().to_os_string();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))
}
