//! Run manifests written next to every stage artifact.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const TOOL: &str = "semergy";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub stage: String,
    pub inputs: Vec<InputDigest>,
    pub config: Value,
    pub config_sha256: String,
    pub artifact: InputDigest,
    pub stats: Value,
    /// Seconds since the Unix epoch. The only field that varies between
    /// otherwise identical runs.
    pub created_at: u64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut reader = BufReader::new(file);
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = reader.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `<artifact>.manifest.json`, or `<dir>/manifest.json` for directory
/// artifacts.
pub fn manifest_path(artifact: &Path) -> PathBuf {
    if artifact.is_dir() {
        artifact.join("manifest.json")
    } else {
        let mut name = artifact.as_os_str().to_owned();
        name.push(".manifest.json");
        PathBuf::from(name)
    }
}

impl Manifest {
    pub fn new(stage: &str, inputs: &[&Path], config: Value, artifact: &Path, stats: Value) -> Result<Self> {
        let inputs = inputs
            .iter()
            .map(|p| digest(p))
            .collect::<Result<Vec<_>>>()?;
        let config_sha256 = sha256_bytes(serde_json::to_string(&config)?.as_bytes());
        let artifact = if artifact.is_dir() {
            InputDigest {
                path: artifact.display().to_string(),
                sha256: dir_digest(artifact)?,
            }
        } else {
            digest(artifact)?
        };
        Ok(Self {
            tool: TOOL,
            version: VERSION,
            stage: stage.to_string(),
            inputs,
            config,
            config_sha256,
            artifact,
            stats,
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        })
    }

    pub fn write(&self, artifact: &Path) -> Result<PathBuf> {
        let path = manifest_path(artifact);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn digest(path: &Path) -> Result<InputDigest> {
    Ok(InputDigest {
        path: path.display().to_string(),
        sha256: sha256_file(path)?,
    })
}

/// Hash over `name\0sha256\n` for every regular file except the manifest,
/// in sorted name order.
fn dir_digest(dir: &Path) -> Result<String> {
    let mut entries: Vec<PathBuf> = Vec::new();
    collect_files(dir, &mut entries)?;
    entries.sort();
    let mut hasher = Sha256::new();
    for path in entries {
        let rel = path.strip_prefix(dir).unwrap_or(&path);
        if rel == Path::new("manifest.json") {
            continue;
        }
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0]);
        hasher.update(sha256_file(&path)?.as_bytes());
        hasher.update(b"\n");
    }
    Ok(hex::encode(hasher.finalize()))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}
