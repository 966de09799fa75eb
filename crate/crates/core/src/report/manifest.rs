use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    /// Path relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Record of one run: what produced the artifacts and their hashes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub stages: Vec<String>,
    pub seeds: BTreeMap<String, u64>,
    /// SHA-256 of the configuration text the run was started with.
    pub config_sha256: Option<String>,
    pub inputs: Vec<ArtifactEntry>,
    pub artifacts: Vec<ArtifactEntry>,
}

impl RunManifest {
    pub fn new(stages: Vec<String>) -> Self {
        RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            stages,
            seeds: BTreeMap::new(),
            config_sha256: None,
            inputs: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    /// Hash an input file by its path as given.
    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.inputs.push(ArtifactEntry {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    /// Artifacts whose current bytes no longer match the recorded hash.
    pub fn verify(&self, dir: &Path) -> Vec<String> {
        self.artifacts
            .iter()
            .filter(|a| std::fs::read(dir.join(&a.path)).map(|b| sha256_hex(&b) != a.sha256).unwrap_or(true))
            .map(|a| a.path.clone())
            .collect()
    }
}

/// Writes artifacts under one directory and records their hashes.
pub struct ArtifactWriter {
    dir: PathBuf,
    entries: BTreeMap<String, ArtifactEntry>,
}

impl ArtifactWriter {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(ArtifactWriter {
            dir: dir.to_path_buf(),
            entries: BTreeMap::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.entries.insert(
            rel.to_string(),
            ArtifactEntry {
                path: rel.to_string(),
                sha256: sha256_hex(bytes),
                bytes: bytes.len() as u64,
            },
        );
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(rel, s.as_bytes())
    }

    /// Record a file some other code already wrote under the directory.
    pub fn track(&mut self, rel: &str) -> Result<()> {
        let path = self.dir.join(rel);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.entries.insert(
            rel.to_string(),
            ArtifactEntry {
                path: rel.to_string(),
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            },
        );
        Ok(())
    }

    pub fn entries(&self) -> Vec<ArtifactEntry> {
        self.entries.values().cloned().collect()
    }

    /// Write `manifest.json` listing every artifact so far.
    pub fn finish(mut self, mut manifest: RunManifest) -> Result<RunManifest> {
        manifest.artifacts = self.entries();
        self.write_json("manifest.json", &manifest)?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_detects_changes() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = ArtifactWriter::new(dir.path()).unwrap();
        w.write("tables/main.csv", b"a,b\n").unwrap();
        w.write("did.csv", b"x\n").unwrap();
        let m = w.finish(RunManifest::new(vec!["report".into()])).unwrap();
        assert_eq!(m.artifacts.len(), 2);
        assert!(m.verify(dir.path()).is_empty());
        std::fs::write(dir.path().join("did.csv"), b"y\n").unwrap();
        assert_eq!(m.verify(dir.path()), vec!["did.csv".to_string()]);
    }
}
