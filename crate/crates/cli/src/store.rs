//! Append-only result store: one directory per run, each with a manifest
//! listing its inputs and every file it wrote.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::Command;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to re-execute a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Globals {
    pub seed: u64,
    pub tau: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub config: RunConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: Command,
    pub globals: Globals,
    pub inputs: Vec<FileHash>,
    /// Paths relative to the run directory.
    pub outputs: Vec<FileHash>,
    pub wall_clock_seconds: f64,
}

impl Manifest {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> anyhow::Result<String> {
    Ok(sha256_hex(&fs::read(path).with_context(|| format!("reading {}", path.display()))?))
}

/// A run directory being filled. Files may only be created, never replaced.
pub struct Run {
    pub dir: PathBuf,
    outputs: Vec<String>,
}

impl Run {
    /// Creates `<out>/<command>-<key>`, adding a `-N` suffix when an earlier
    /// run with the same key exists. Existing directories are never reused.
    pub fn create(out: &Path, command: &str, key: &str) -> anyhow::Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let base = format!("{command}-{}", &key[..12]);
        for n in 0.. {
            let dir = if n == 0 { out.join(&base) } else { out.join(format!("{base}-{n}")) };
            match fs::create_dir(&dir) {
                Ok(()) => return Ok(Run { dir, outputs: Vec::new() }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
            }
        }
        unreachable!()
    }

    /// Removes a run that failed before its manifest was written.
    pub fn abandon(self) {
        let _ = fs::remove_dir_all(&self.dir);
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Registers a file written by other means (checkpoints, caches).
    pub fn record(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> anyhow::Result<PathBuf> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut f = fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| format!("creating {}", path.display()))?;
        std::io::Write::write_all(&mut f, bytes)?;
        self.record(name);
        Ok(path)
    }

    pub fn write_csv<R: Serialize>(&mut self, name: &str, rows: &[R]) -> anyhow::Result<PathBuf> {
        self.write(name, &csv_bytes(rows)?)
    }

    pub fn finish(self, manifest: impl FnOnce(Vec<FileHash>) -> Manifest) -> anyhow::Result<PathBuf> {
        let mut names = self.outputs;
        names.sort();
        let outputs = names
            .iter()
            .map(|n| Ok(FileHash { path: n.clone(), sha256: hash_file(&self.dir.join(n))? }))
            .collect::<anyhow::Result<Vec<_>>>()?;
        let m = manifest(outputs);
        let path = self.dir.join(MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&m)? + "\n")?;
        Ok(path)
    }
}

pub fn csv_bytes<R: Serialize>(rows: &[R]) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(w.into_inner()?)
}

/// All manifests directly under `root`, sorted by run directory name.
pub fn scan(root: &Path) -> anyhow::Result<Vec<(PathBuf, Manifest)>> {
    let mut out = Vec::new();
    if !root.exists() {
        return Ok(out);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    dirs.sort();
    for d in dirs {
        let m = d.join(MANIFEST);
        if m.exists() {
            out.push((d, Manifest::load(&m)?));
        }
    }
    Ok(out)
}
