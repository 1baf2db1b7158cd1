use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Result;
use serde::{Deserialize, Serialize};

/// Record of one completed command, written next to its artifacts.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// Fully resolved settings; rerunning with them reproduces the artifacts.
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<PathBuf>,
    pub version: String,
    pub duration_secs: f64,
}

pub struct ManifestBuilder {
    command: String,
    started: Instant,
    seeds: BTreeMap<String, u64>,
    artifacts: Vec<PathBuf>,
}

impl ManifestBuilder {
    pub fn new(command: &str) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            started: Instant::now(),
            seeds: BTreeMap::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn seed(&mut self, label: &str, seed: u64) {
        self.seeds.insert(label.to_string(), seed);
    }

    pub fn artifact(&mut self, path: impl Into<PathBuf>) {
        self.artifacts.push(path.into());
    }

    pub fn artifacts(&mut self, paths: impl IntoIterator<Item = PathBuf>) {
        self.artifacts.extend(paths);
    }

    /// Writes the manifest atomically to `path`.
    pub fn finish<C: Serialize>(self, config: &C, path: &Path) -> Result<RunManifest> {
        let manifest = RunManifest {
            command: self.command,
            argv: std::env::args().collect(),
            config: serde_json::to_value(config)?,
            seeds: self.seeds,
            artifacts: self.artifacts,
            version: env!("CARGO_PKG_VERSION").to_string(),
            duration_secs: self.started.elapsed().as_secs_f64(),
        };
        nvar::io::write_json(path, &manifest)?;
        Ok(manifest)
    }
}

/// `dir/foo.csv` -> `dir/foo.manifest.json`.
pub fn manifest_path(artifact: &Path) -> PathBuf {
    artifact.with_extension("manifest.json")
}
