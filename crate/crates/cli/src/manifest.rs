//! `manifest.json`: what produced a run directory and what it contains.

use std::path::{Path, PathBuf};

use anyhow::Context;
use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: Option<String>,
    pub version: String,
    pub started: String,
    pub finished: String,
    pub wall_seconds: f64,
    pub artifacts: Vec<Artifact>,
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else if p != root.join(MANIFEST_FILE) {
            out.push(p);
        }
    }
    Ok(())
}

/// Lists every file under `dir` (except the manifest itself) with its digest.
pub fn inventory(dir: &Path) -> anyhow::Result<Vec<Artifact>> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files
        .iter()
        .map(|p| {
            let rel = p.strip_prefix(dir).expect("under dir");
            Ok(Artifact {
                path: rel
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy())
                    .collect::<Vec<_>>()
                    .join("/"),
                bytes: std::fs::metadata(p)?.len(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

fn stamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn write_manifest(
    dir: &Path,
    command: &str,
    config_hash: Option<String>,
    started: DateTime<Utc>,
) -> anyhow::Result<RunManifest> {
    let finished = Utc::now();
    let manifest = RunManifest {
        command: command.into(),
        config_hash,
        version: crate::VERSION.into(),
        started: stamp(started),
        finished: stamp(finished),
        wall_seconds: (finished - started).num_milliseconds() as f64 / 1000.0,
        artifacts: inventory(dir)?,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> anyhow::Result<RunManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text =
        std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}
