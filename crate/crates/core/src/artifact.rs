//! Stage artifacts on disk.
//!
//! JSON-lines artifacts start with a provenance line `{"meta": {...}}`
//! carrying the producing stage, config hash and seed; JSON documents carry
//! the same object under a top-level `meta` key. Readers that do not care
//! about provenance skip the header.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactMeta {
    pub artifact: String,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: ArtifactMeta,
}

impl ArtifactMeta {
    /// Refuses artifacts produced under a different configuration.
    pub fn check(&self, path: &Path, config_hash: &str) -> Result<()> {
        if self.config_hash != config_hash {
            return Err(Error::ArtifactMismatch {
                path: path.to_path_buf(),
                expected: config_hash.to_string(),
                found: self.config_hash.clone(),
            });
        }
        Ok(())
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, meta: Option<&ArtifactMeta>, records: &[T]) -> Result<()> {
    let mut out = String::new();
    if let Some(meta) = meta {
        let header =
            serde_json::to_string(&Header { meta: meta.clone() }).map_err(|e| Error::json("artifact header", e))?;
        out.push_str(&header);
        out.push('\n');
    }
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::json("artifact record", e))?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(Option<ArtifactMeta>, Vec<T>)> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut meta = None;
    let mut records = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 {
            if let Ok(h) = serde_json::from_str::<Header>(line) {
                meta = Some(h.meta);
                continue;
            }
        }
        let r = serde_json::from_str(line).map_err(|e| Error::json(format!("{}:{}", path.display(), i + 1), e))?;
        records.push(r);
    }
    Ok((meta, records))
}

#[derive(Serialize, Deserialize)]
struct Document<T> {
    meta: ArtifactMeta,
    #[serde(flatten)]
    body: T,
}

pub fn write_json<T: Serialize>(path: &Path, meta: &ArtifactMeta, body: &T) -> Result<()> {
    let doc = Document {
        meta: meta.clone(),
        body,
    };
    let mut text = serde_json::to_string_pretty(&doc).map_err(|e| Error::json("artifact document", e))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<(ArtifactMeta, T)> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let doc: Document<T> = serde_json::from_str(&raw).map_err(|e| Error::json(format!("{}", path.display()), e))?;
    Ok((doc.meta, doc.body))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming into {}", path.display()), e))
}
