//! Checkpoint format: `"CRF1" | labels: u32 LE | dim: u32 LE | params: f64 LE…`
//! in [`CrfModel`] parameter order, plus a JSON sidecar (`<path>.json`) with
//! label names and the training configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CrfModel, TrainConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CRF1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub labels: Vec<String>,
    pub schema: Vec<String>,
    pub dim: usize,
    pub train: TrainConfig,
    pub config_hash: String,
    pub seed: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn to_bytes(model: &CrfModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + model.params().len() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(model.labels() as u32).to_le_bytes());
    out.extend_from_slice(&(model.dim() as u32).to_le_bytes());
    for p in model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<CrfModel> {
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("missing CRF1 header".into()));
    }
    let labels = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    let expected = CrfModel::param_count(labels, dim);
    if body.len() != expected * 8 {
        return Err(Error::Checkpoint(format!(
            "expected {expected} parameters, found {} bytes",
            body.len()
        )));
    }
    let params = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    CrfModel::from_params(labels, dim, params)
}

pub fn save_checkpoint(path: &Path, model: &CrfModel, meta: &CheckpointMeta) -> Result<()> {
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(meta).map_err(|e| Error::json("encoding checkpoint sidecar", e))?;
    fs::write(&side, json + "\n").map_err(|e| Error::io(format!("writing {}", side.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<(CrfModel, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let model = from_bytes(&bytes)?;
    let side = sidecar_path(path);
    let raw = fs::read_to_string(&side).map_err(|e| Error::io(format!("reading {}", side.display()), e))?;
    let meta: CheckpointMeta = serde_json::from_str(&raw).map_err(|e| Error::json("checkpoint sidecar", e))?;
    if meta.labels.len() != model.labels() || meta.dim != model.dim() {
        return Err(Error::Checkpoint(format!(
            "sidecar describes {}×{} but weights are {}×{}",
            meta.labels.len(),
            meta.dim,
            model.labels(),
            model.dim()
        )));
    }
    Ok((model, meta))
}
