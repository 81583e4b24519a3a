//! Run manifests: a machine-readable record of what a command did, written
//! atomically at the end of the run, sufficient to reproduce it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Subcommand name.
    pub command: String,
    /// Full config snapshot (command-specific shape).
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub code_version: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub wall_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            config,
            seeds: Vec::new(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            wall_secs: 0.0,
        }
    }

    /// Write via a temp file and rename, so readers never observe a
    /// partially written manifest.
    pub fn write_atomic(&self, path: &Path) -> std::io::Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, json)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> std::io::Result<RunManifest> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_and_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let mut m = RunManifest::new("worldgen", serde_json::json!({"count": 3}));
        m.seeds = vec![1, 2];
        m.outputs = vec!["world_0.txt".to_string()];
        m.wall_secs = 0.25;
        m.write_atomic(&path).unwrap();
        let back = RunManifest::load(&path).unwrap();
        assert_eq!(m, back);
        assert!(!path.with_extension("json.tmp").exists());
    }
}
