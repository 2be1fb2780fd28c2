//! Run manifests: what ran, with which seeds, and digests of every artifact.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the run directory, with `/` separators.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub verb: String,
    pub config_digest: String,
    pub code_version: String,
    pub seeds: BTreeMap<String, u64>,
    pub started_at: f64,
    pub finished_at: Option<f64>,
    pub status: RunStatus,
    pub error: Option<String>,
    pub artifacts: Vec<Artifact>,
}

pub fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub fn file_digest(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn start(run_id: &str, verb: &str, config_digest: String, seeds: BTreeMap<String, u64>) -> Self {
        Self {
            run_id: run_id.to_string(),
            verb: verb.to_string(),
            config_digest,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seeds,
            started_at: now(),
            finished_at: None,
            status: RunStatus::Running,
            error: None,
            artifacts: Vec::new(),
        }
    }

    /// Digests every file under `dir` except the manifest itself.
    pub fn collect_artifacts(&mut self, dir: &Path) -> anyhow::Result<()> {
        let mut files = Vec::new();
        walk(dir, dir, &mut files)?;
        files.sort();
        self.artifacts = files
            .into_iter()
            .filter(|rel| rel != MANIFEST_FILE)
            .map(|rel| Ok(Artifact { sha256: file_digest(&dir.join(&rel))?, path: rel }))
            .collect::<anyhow::Result<_>>()?;
        Ok(())
    }

    pub fn finish(&mut self, dir: &Path, result: &anyhow::Result<()>) -> anyhow::Result<()> {
        self.finished_at = Some(now());
        match result {
            Ok(()) => self.status = RunStatus::Succeeded,
            Err(e) => {
                self.status = RunStatus::Failed;
                self.error = Some(format!("{e:#}"));
            }
        }
        self.collect_artifacts(dir)?;
        self.write(dir)
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> anyhow::Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Checks that every listed artifact exists with a matching digest.
    pub fn verify(&self, dir: &Path) -> anyhow::Result<()> {
        for a in &self.artifacts {
            let path = dir.join(&a.path);
            if !path.exists() {
                bail!("artifact {} is missing", a.path);
            }
            let d = file_digest(&path)?;
            if d != a.sha256 {
                bail!("artifact {} digest {d} does not match {}", a.path, a.sha256);
            }
        }
        Ok(())
    }
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> anyhow::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            walk(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root)?;
            out.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
        }
    }
    Ok(())
}
