//! File plumbing shared by all commands: atomic writes, dataset references,
//! and run manifests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dismax_core::data::{load_idx, Dataset};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::UsageError;

pub const MANIFEST_VERSION: u32 = 1;

/// Writes `bytes` to a sibling temp file, syncs it, then renames it over
/// `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let name = path
        .file_name()
        .ok_or_else(|| UsageError(format!("'{}' is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))?;
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Where a dataset lives: a JSON cache file, or IDX images with optional
/// labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataRef {
    pub images: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
}

impl DataRef {
    pub fn new(images: PathBuf, labels: Option<PathBuf>) -> Self {
        DataRef { images, labels }
    }

    /// Relative paths that do not exist are looked up in the cache directory.
    pub fn resolve(&self, cache_dir: &Path) -> DataRef {
        let fix = |p: &Path| {
            if p.is_relative() && !p.exists() && cache_dir.join(p).exists() {
                cache_dir.join(p)
            } else {
                p.to_path_buf()
            }
        };
        DataRef {
            images: fix(&self.images),
            labels: self.labels.as_deref().map(fix),
        }
    }

    pub fn paths(&self) -> Vec<&Path> {
        std::iter::once(self.images.as_path())
            .chain(self.labels.as_deref())
            .collect()
    }

    pub fn load(&self, cache_dir: &Path) -> Result<Dataset> {
        let r = self.resolve(cache_dir);
        let data = if is_json(&r.images) {
            if r.labels.is_some() {
                return Err(UsageError(
                    "a JSON dataset carries its own labels; drop the labels path".into(),
                )
                .into());
            }
            Dataset::load_cache(&r.images)
        } else {
            load_idx(&r.images, r.labels.as_deref())
        };
        data.with_context(|| format!("loading dataset {}", r.images.display()))
    }
}

pub fn is_json(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

impl Artifact {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Artifact {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }
}

/// Record of one CLI run, enough to replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub tool_version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub config: Option<serde_json::Value>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Manifest {
            manifest_version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            argv: std::env::args().collect(),
            config_hash: None,
            seed: None,
            config: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(Artifact::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(Artifact::of(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())?;
        log::info!("manifest written to {}", path.display());
        Ok(())
    }
}

/// `<path>.manifest.json`
pub fn manifest_path_for(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Manifest location for runs without a natural primary artifact.
pub fn manifest_in_cache(cache_dir: &Path, command: &str) -> PathBuf {
    let args: Vec<String> = std::env::args().collect();
    let digest = hex::encode(Sha256::digest(args.join("\0").as_bytes()));
    cache_dir
        .join("manifests")
        .join(format!("{command}-{}.json", &digest[..12]))
}
