//! Run manifests written next to every produced artifact, and the
//! per-directory writer lock.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{ErrorKind, Read};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Hash of a value's canonical JSON form.
pub fn sha256_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_bytes(serde_json::to_string(value)?.as_bytes()))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub version: String,
    pub seed: u64,
    /// Effective configuration after flag overrides.
    pub config: serde_json::Value,
    pub config_hash: String,
    /// Input file → sha256.
    pub inputs: BTreeMap<String, String>,
    /// Output file → sha256.
    pub outputs: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

impl RunManifest {
    pub fn start<C: Serialize>(command: Vec<String>, seed: u64, config: &C) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        Ok(RunManifest {
            command,
            version: VERSION.to_string(),
            seed,
            config_hash: sha256_json(&config)?,
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            started_unix: unix_now(),
            finished_unix: 0,
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let hash = if path.is_dir() { dir_hash(path)? } else { sha256_file(path)? };
        self.inputs.insert(path.display().to_string(), hash);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        let hash = if path.is_dir() { dir_hash(path)? } else { sha256_file(path)? };
        self.outputs.insert(path.display().to_string(), hash);
        Ok(())
    }

    /// Stamps the finish time and writes `path`.
    pub fn finish(mut self, path: &Path) -> Result<()> {
        self.finished_unix = unix_now();
        let text = serde_json::to_string_pretty(&self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Manifest path for an artifact: `x.jsonl` → `x.jsonl.manifest.json`,
/// directories get `manifest.json` inside.
pub fn manifest_path(artifact: &Path) -> PathBuf {
    if artifact.is_dir() {
        artifact.join("manifest.json")
    } else {
        let mut name = artifact.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        artifact.with_file_name(name)
    }
}

/// Hash over the sorted (name, content hash) pairs of a directory's files,
/// ignoring manifests and the lock.
fn dir_hash(dir: &Path) -> Result<String> {
    let mut entries = BTreeMap::new();
    collect(dir, dir, &mut entries)?;
    sha256_json(&entries)
}

fn collect(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.strip_prefix(root).unwrap_or(&path).display().to_string();
        if name.ends_with("manifest.json") || name.ends_with(LOCK_FILE) {
            continue;
        }
        if path.is_dir() {
            collect(root, &path, out)?;
        } else {
            out.insert(name, sha256_file(&path)?);
        }
    }
    Ok(())
}

pub const LOCK_FILE: &str = ".dtigen.lock";

/// Exclusive writer lock on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} is locked by another writer (remove {} if no run is active)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = DirLock::acquire(dir.path()).unwrap();
        assert!(DirLock::acquire(dir.path()).is_err());
        drop(a);
        assert!(DirLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn manifest_records_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("x.txt");
        std::fs::write(&f, "abc").unwrap();
        let mut m = RunManifest::start(vec!["cmd".into()], 3, &serde_json::json!({"k": 1})).unwrap();
        m.input(&f).unwrap();
        m.output(dir.path()).unwrap();
        assert_eq!(
            m.inputs[&f.display().to_string()],
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        let mp = manifest_path(&f);
        assert!(mp.to_string_lossy().ends_with("x.txt.manifest.json"));
        m.finish(&mp).unwrap();
        let back: RunManifest = serde_json::from_str(&std::fs::read_to_string(&mp).unwrap()).unwrap();
        assert_eq!(back.seed, 3);
        assert!(back.finished_unix >= back.started_unix);
    }
}
