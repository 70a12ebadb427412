use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Artifact name → path relative to the output directory (absolute for
    /// external inputs).
    pub artifacts: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    /// Keyed by stage, with the mode appended for mode-specific stages
    /// (`train-bnn/tracked`).
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn new(config_hash: &str, seed: u64) -> Self {
        Self {
            tool_version: TOOL_VERSION.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            stages: BTreeMap::new(),
        }
    }

    /// Loads the manifest in `dir` if it belongs to the same config; a
    /// manifest from a different config is discarded.
    pub fn load_or_new(dir: &Path, config_hash: &str, seed: u64) -> CliResult<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::new(config_hash, seed));
        }
        let text = fs::read_to_string(&path).map_err(io_err(format!("reading {}", path.display())))?;
        let m: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("corrupt manifest {}: {e}", path.display())))?;
        Ok(if m.config_hash == config_hash { m } else { Self::new(config_hash, seed) })
    }

    /// Writes to a temporary file and renames it over the manifest.
    pub fn write_atomic(&self, dir: &Path) -> CliResult<()> {
        fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(&tmp, text).map_err(io_err(format!("writing {}", tmp.display())))?;
        fs::rename(&tmp, dir.join(MANIFEST_FILE)).map_err(io_err("replacing manifest"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_reset_on_new_config() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("abc", 5);
        m.stages.entry("generate".into()).or_default().metrics.insert("windows".into(), 12.0);
        m.write_atomic(dir.path()).unwrap();
        assert!(!dir.path().join("manifest.json.tmp").exists());
        assert_eq!(RunManifest::load_or_new(dir.path(), "abc", 5).unwrap(), m);
        assert!(RunManifest::load_or_new(dir.path(), "def", 5).unwrap().stages.is_empty());
    }
}
