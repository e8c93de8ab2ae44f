//! Frozen embedding stores.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! "EMB1" | kind: u8 | dim: u32 | count: u32
//! count × [ key_len: u16 | key: utf-8 | dim × f32 ]
//! ```
//!
//! Kind bytes: 0 token, 1 sentence, 2 entity, 3 image. A JSON-lines form is
//! also accepted: an optional header `{"kind": "sentence", "dim": 4}` followed
//! by `{"key": "...", "vec": [...]}` records.
//!
//! Key scheme shared with the exporter:
//! - sentence: the sample id
//! - token: `{sample_id}#{token_index}`, or the bare token surface for
//!   type-level stores
//! - entity: [`entity_key`] of the mention surface
//! - image: [`image_key`] of the image path

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EMB1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StoreKind {
    Token,
    Sentence,
    Entity,
    Image,
}

impl StoreKind {
    pub fn to_byte(self) -> u8 {
        match self {
            StoreKind::Token => 0,
            StoreKind::Sentence => 1,
            StoreKind::Entity => 2,
            StoreKind::Image => 3,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            0 => StoreKind::Token,
            1 => StoreKind::Sentence,
            2 => StoreKind::Entity,
            3 => StoreKind::Image,
            other => return Err(Error::EmbeddingFormat(format!("unknown kind byte {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmbeddingFormat("zero-dimensional vector".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("<inline>".into()));
        }
        Ok(EmbeddingVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl AsRef<[f64]> for EmbeddingVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    cosine_slices(a.values(), b.values())
}

pub fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            found: b.len(),
            key: None,
        });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

fn short_hash(s: &str) -> String {
    let digest = Sha256::digest(s.as_bytes());
    hex::encode(&digest[..8])
}

pub fn entity_key(surface: &str) -> String {
    short_hash(surface)
}

pub fn image_key(path: &str) -> String {
    short_hash(path)
}

pub fn token_key(sample_id: &str, index: usize) -> String {
    format!("{sample_id}#{index}")
}

#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    kind: Option<StoreKind>,
    dim: usize,
    keys: Vec<String>,
    vectors: HashMap<String, EmbeddingVector>,
}

impl EmbeddingStore {
    pub fn new(kind: Option<StoreKind>, dim: usize) -> Self {
        EmbeddingStore {
            kind,
            dim,
            keys: Vec::new(),
            vectors: HashMap::new(),
        }
    }

    pub fn kind(&self) -> Option<StoreKind> {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Keys in insertion order.
    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn insert(&mut self, key: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let key = key.into();
        if values.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                found: values.len(),
                key: Some(key),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(key));
        }
        if self.vectors.contains_key(&key) {
            return Err(Error::DuplicateKey(key));
        }
        self.keys.push(key.clone());
        self.vectors.insert(key, EmbeddingVector(values));
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<&EmbeddingVector> {
        self.vectors.get(key).ok_or_else(|| Error::MissingKey(key.to_string()))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.vectors.contains_key(key)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ctx = || format!("reading {}", path.display());
        let mut file = fs::File::open(path).map_err(|e| Error::io(ctx(), e))?;
        let mut head = [0u8; 4];
        let n = file.read(&mut head).map_err(|e| Error::io(ctx(), e))?;
        drop(file);
        if n == 4 && &head == MAGIC {
            let bytes = fs::read(path).map_err(|e| Error::io(ctx(), e))?;
            Self::from_binary(&bytes)
        } else {
            let file = fs::File::open(path).map_err(|e| Error::io(ctx(), e))?;
            Self::from_jsonl(BufReader::new(file))
        }
    }

    pub fn from_binary(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::EmbeddingFormat("bad magic".into()));
        }
        let kind = StoreKind::from_byte(cur.take(1)?[0])?;
        let dim = cur.u32()? as usize;
        if dim == 0 {
            return Err(Error::EmbeddingFormat("dim must be positive".into()));
        }
        let count = cur.u32()? as usize;
        let mut store = EmbeddingStore::new(Some(kind), dim);
        for _ in 0..count {
            let klen = cur.u16()? as usize;
            let key = std::str::from_utf8(cur.take(klen)?)
                .map_err(|_| Error::EmbeddingFormat("key is not utf-8".into()))?
                .to_string();
            let raw = cur.take(dim * 4).map_err(|_| Error::DimMismatch {
                expected: dim,
                found: (bytes.len().saturating_sub(cur.pos)) / 4,
                key: Some(key.clone()),
            })?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            store.insert(key, values)?;
        }
        if cur.pos != bytes.len() {
            return Err(Error::EmbeddingFormat(format!(
                "{} trailing bytes after {count} records",
                bytes.len() - cur.pos
            )));
        }
        Ok(store)
    }

    pub fn from_jsonl(reader: impl BufRead) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Line {
            Record { key: String, vec: Vec<f64> },
            Header { kind: StoreKind, dim: usize },
        }
        let mut store: Option<EmbeddingStore> = None;
        let mut header: Option<(StoreKind, usize)> = None;
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io("reading embedding jsonl", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line =
                serde_json::from_str(&line).map_err(|e| Error::json(format!("embedding jsonl line {}", i + 1), e))?;
            match parsed {
                Line::Header { kind, dim } => {
                    if store.is_some() || header.is_some() {
                        return Err(Error::EmbeddingFormat("header must be the first line".into()));
                    }
                    header = Some((kind, dim));
                }
                Line::Record { key, vec } => {
                    let s = store.get_or_insert_with(|| match header {
                        Some((kind, dim)) => EmbeddingStore::new(Some(kind), dim),
                        None => EmbeddingStore::new(None, vec.len()),
                    });
                    s.insert(key, vec)?;
                }
            }
        }
        match (store, header) {
            (Some(s), _) => Ok(s),
            (None, Some((kind, dim))) => Ok(EmbeddingStore::new(Some(kind), dim)),
            (None, None) => Err(Error::EmbeddingFormat("empty embedding file".into())),
        }
    }

    pub fn to_binary(&self) -> Result<Vec<u8>> {
        let kind = self
            .kind
            .ok_or_else(|| Error::EmbeddingFormat("binary stores need a kind".into()))?;
        let mut out = Vec::with_capacity(13 + self.len() * (2 + 8 + self.dim * 4));
        out.extend_from_slice(MAGIC);
        out.push(kind.to_byte());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for key in &self.keys {
            let kb = key.as_bytes();
            let klen = u16::try_from(kb.len()).map_err(|_| Error::EmbeddingFormat(format!("key too long: {key}")))?;
            out.extend_from_slice(&klen.to_le_bytes());
            out.extend_from_slice(kb);
            for v in self.vectors[key].values() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let bytes = self.to_binary()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        f.write_all(&bytes)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::EmbeddingFormat(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
}
