//! Run manifests and run directories.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::hash_json;
use crate::error::{Error, Result};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub command: String,
    /// Fully resolved configuration (file plus overrides).
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub started_at: String,
    pub finished_at: String,
    /// Artifact file names relative to the run directory.
    pub artifacts: Vec<String>,
    /// Command-specific results, such as success rates.
    #[serde(default)]
    pub summary: serde_json::Map<String, serde_json::Value>,
    pub code_version: String,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seeds: Vec<u64>, started_at: String) -> Self {
        let config_hash = hash_json(&config);
        Self {
            format_version: MANIFEST_FORMAT_VERSION,
            command: command.to_string(),
            config,
            config_hash,
            seeds,
            started_at,
            finished_at: String::new(),
            artifacts: Vec::new(),
            summary: serde_json::Map::new(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    /// True when the stored hash matches the echoed config.
    pub fn hash_is_consistent(&self) -> bool {
        hash_json(&self.config) == self.config_hash
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "manifest",
            message: e.to_string(),
        })
    }
}

/// Creates `<root>/<stamp>-<hash8>`, adding `-1`, `-2`, ... if that exists,
/// so an existing run directory is never reused.
pub fn create_run_dir(root: &Path, stamp: &str, config_hash: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let base = format!("{stamp}-{}", &config_hash[..config_hash.len().min(8)]);
    for attempt in 0.. {
        let name = if attempt == 0 { base.clone() } else { format!("{base}-{attempt}") };
        let dir = root.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!()
}
