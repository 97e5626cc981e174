//! Run manifest: per stage, the cache key, parameters, seeds, and the content
//! hashes of every input and output file.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub key: String,
    pub params: Value,
    pub seeds: BTreeMap<String, u64>,
    /// Input name (artifact path relative to the output directory, or the
    /// configured external path) -> SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output path relative to the output directory -> SHA-256.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            stages: BTreeMap::new(),
        }
    }
}

impl Manifest {
    pub fn load(output_dir: &Path) -> Result<Self> {
        let path = output_dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.version != env!("CARGO_PKG_VERSION") {
            log::info!("manifest from version {}; starting afresh", m.version);
            return Ok(Self::default());
        }
        Ok(m)
    }

    pub fn save(&self, output_dir: &Path) -> Result<()> {
        let path = output_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// True when `stage` was recorded with `key` and its outputs are intact.
    pub fn is_fresh(&self, stage: &str, key: &str, output_dir: &Path) -> bool {
        let Some(rec) = self.stages.get(stage) else {
            return false;
        };
        rec.key == key
            && rec
                .outputs
                .iter()
                .all(|(rel, hash)| file_hash(&output_dir.join(rel)).is_ok_and(|h| &h == hash))
    }
}

pub fn file_hash(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
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

/// Cache key of a stage run.
pub fn stage_key(stage: &str, params: &Value, inputs: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    h.update(env!("CARGO_PKG_VERSION").as_bytes());
    h.update(b"\0");
    h.update(stage.as_bytes());
    h.update(b"\0");
    h.update(params.to_string().as_bytes());
    for (name, hash) in inputs {
        h.update(b"\0");
        h.update(name.as_bytes());
        h.update(b"=");
        h.update(hash.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Every file below `dir`, as sorted `/`-separated paths relative to `root`.
pub fn list_files(root: &Path, dir: &Path) -> Result<Vec<String>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                out.push(relative(root, &p));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    if dir.exists() {
        walk(root, dir, &mut out)?;
    }
    out.sort();
    Ok(out)
}

pub fn relative(root: &Path, p: &Path) -> String {
    let rel = p.strip_prefix(root).unwrap_or(p);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}
