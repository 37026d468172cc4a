//! Per-run record of produced artifacts, seeds and timings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use idiomkit_core::io::{atomic_write, file_sha256, read_to_string};
use idiomkit_core::{Error, Result, Variant};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactKind {
    Config,
    Prepared,
    Checkpoint,
    Bank,
    Report,
    Prediction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub kind: ArtifactKind,
    pub producer: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tag: String,
    pub variant: Variant,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    /// Keyed by path relative to the run directory.
    pub artifacts: BTreeMap<String, ArtifactRecord>,
    /// Wall-clock seconds of the latest run of each command.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(tag: &str, variant: Variant, config_hash: &str, seeds: BTreeMap<String, u64>) -> Self {
        Self {
            tag: tag.to_string(),
            variant,
            config_hash: config_hash.to_string(),
            seeds,
            artifacts: BTreeMap::new(),
            timings: BTreeMap::new(),
        }
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::MissingArtifact { path, producer: "ingest".into() });
        }
        Ok(serde_json::from_str(&read_to_string(&path)?)?)
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        atomic_write(&run_dir.join(MANIFEST_FILE), (serde_json::to_string_pretty(self)? + "\n").as_bytes())
    }

    /// Hashes `path` (inside `run_dir`) and records it.
    pub fn record(&mut self, run_dir: &Path, path: &Path, kind: ArtifactKind, producer: &str) -> Result<()> {
        let rel = path
            .strip_prefix(run_dir)
            .map_err(|_| Error::Validation(format!("{} is outside the run directory", path.display())))?;
        let bytes = std::fs::metadata(path).map_err(|e| Error::io(path, e))?.len();
        let key = rel.to_string_lossy().replace('\\', "/");
        self.artifacts.insert(
            key,
            ArtifactRecord { kind, producer: producer.to_string(), sha256: file_sha256(path)?, bytes },
        );
        Ok(())
    }

    pub fn paths_of(&self, kind: ArtifactKind) -> Vec<PathBuf> {
        self.artifacts.iter().filter(|(_, r)| r.kind == kind).map(|(p, _)| PathBuf::from(p)).collect()
    }

    /// Re-hashes every artifact and reports the ones that changed or vanished.
    pub fn verify(&self, run_dir: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for (rel, rec) in &self.artifacts {
            let p = run_dir.join(rel);
            if !p.exists() || file_sha256(&p)? != rec.sha256 {
                bad.push(rel.clone());
            }
        }
        Ok(bad)
    }
}
