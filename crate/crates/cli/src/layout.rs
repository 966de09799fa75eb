use std::path::{Path, PathBuf};

use crate::config::Artifact;

/// File locations inside the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Layout { root: root.to_path_buf() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn join(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn essays(&self) -> PathBuf {
        self.join("panel/essays.csv")
    }

    pub fn versions(&self) -> PathBuf {
        self.join("panel/versions.csv")
    }

    pub fn panel_manifest(&self) -> PathBuf {
        self.join("panel/manifest.json")
    }

    pub fn oracle(&self) -> (PathBuf, PathBuf) {
        (self.join("simulate/oracle_predictions.csv"), self.join("simulate/oracle_provenance.json"))
    }

    pub fn truth(&self) -> PathBuf {
        self.join("simulate/truth.json")
    }

    pub fn rewrite_results(&self) -> PathBuf {
        self.join("rewrite/results.jsonl")
    }

    pub fn default_archive(&self) -> PathBuf {
        self.join("rewrite/archive.jsonl")
    }

    pub fn predictions(&self) -> (PathBuf, PathBuf) {
        (self.join("train/predictions.csv"), self.join("train/provenance.json"))
    }

    pub fn setup(&self) -> PathBuf {
        self.join("train/setup.json")
    }

    pub fn decomposition(&self) -> PathBuf {
        self.join("decompose/results.json")
    }

    pub fn diagnostics(&self) -> PathBuf {
        self.join("diagnose/diagnostics.json")
    }

    pub fn bootstrap(&self) -> PathBuf {
        self.join("bootstrap/summary.json")
    }

    pub fn scorer_metrics(&self) -> PathBuf {
        self.join("train/metrics.json")
    }

    pub fn error_record(&self) -> PathBuf {
        self.join("error.json")
    }

    pub fn resolved_config(&self) -> PathBuf {
        self.join("config.toml")
    }

    pub fn path_of(&self, a: Artifact) -> PathBuf {
        match a {
            Artifact::Panel => self.versions(),
            Artifact::Oracle => self.oracle().0,
            Artifact::Rewrites => self.rewrite_results(),
            Artifact::Predictions => self.predictions().0,
            Artifact::Setup => self.setup(),
            Artifact::Decomposition => self.decomposition(),
        }
    }

    pub fn exists(&self, a: Artifact) -> bool {
        match a {
            Artifact::Panel => self.essays().exists() && self.versions().exists() && self.panel_manifest().exists(),
            Artifact::Oracle => self.oracle().0.exists() && self.oracle().1.exists(),
            Artifact::Predictions => self.predictions().0.exists() && self.predictions().1.exists(),
            _ => self.path_of(a).exists(),
        }
    }

    /// Every file under the root except the run manifest and error record,
    /// as sorted relative paths with `/` separators.
    pub fn artifact_files(&self) -> std::io::Result<Vec<String>> {
        let mut out = Vec::new();
        let mut stack = vec![self.root.clone()];
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(&dir)? {
                let path = entry?.path();
                if path.is_dir() {
                    stack.push(path);
                    continue;
                }
                let rel = path.strip_prefix(&self.root).expect("under root");
                let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                if rel != "manifest.json" && rel != "error.json" {
                    out.push(rel);
                }
            }
        }
        out.sort();
        Ok(out)
    }
}
