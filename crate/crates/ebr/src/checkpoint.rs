//! `Q2E1` checkpoint files.
//!
//! Layout: the 4-byte magic `Q2E1`, a little-endian `u64` manifest length,
//! the JSON manifest, then every tensor's values as little-endian `f32` in
//! manifest order.

use std::fs;
use std::path::Path;

use ebr_core::autodiff::ParamSet;
use ebr_core::towers::{TowerConfig, TwoTowerModel};
use ebr_core::training::RunConfig;
use ebr_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{EbrError, Result};

pub const MAGIC: &[u8; 4] = b"Q2E1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tower: TowerConfig,
    /// Run that produced the parameters, when written by `train`.
    pub run: Option<RunConfig>,
    pub epochs_completed: usize,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamSet<f32>,
    /// sha256 of the manifest bytes as stored.
    pub config_hash: String,
}

impl Checkpoint {
    pub fn model(&self) -> Result<TwoTowerModel> {
        Ok(TwoTowerModel::bind(self.manifest.tower.clone(), &self.params)?)
    }
}

fn manifest_bytes(manifest: &Manifest) -> Vec<u8> {
    serde_json::to_vec(manifest).expect("manifest serializes")
}

pub fn config_hash(manifest: &Manifest) -> String {
    hex::encode(Sha256::digest(manifest_bytes(manifest)))
}

pub fn encode(
    tower: &TowerConfig,
    run: Option<&RunConfig>,
    epochs_completed: usize,
    params: &ParamSet<f32>,
) -> Vec<u8> {
    let tensors = params
        .ids()
        .map(|id| TensorEntry {
            name: params.name(id).to_string(),
            shape: params.get(id).shape().to_vec(),
            dtype: "f32".into(),
            trainable: params.is_trainable(id),
        })
        .collect();
    let manifest = Manifest { tower: tower.clone(), run: run.cloned(), epochs_completed, tensors };
    let json = manifest_bytes(&manifest);
    let mut out = Vec::with_capacity(12 + json.len() + 4 * params.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for id in params.ids() {
        for v in params.get(id).data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Writes through a temporary file and a rename, so an interrupted write
/// never replaces a previous good checkpoint.
pub fn save(
    path: &Path,
    tower: &TowerConfig,
    run: Option<&RunConfig>,
    epochs_completed: usize,
    params: &ParamSet<f32>,
) -> Result<()> {
    let bytes = encode(tower, run, epochs_completed, params);
    write_atomic(path, &bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| EbrError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| EbrError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| EbrError::io(path, e))
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| EbrError::format(path, m.to_string());
    if bytes.len() < 4 {
        return Err(bad("file too short for a checkpoint header"));
    }
    if &bytes[..4] != MAGIC {
        if &bytes[..3] == b"Q2E" && bytes[3] != b'I' {
            return Err(EbrError::UnsupportedVersion {
                path: path.to_path_buf(),
                found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
            });
        }
        return Err(bad("not a Q2E1 checkpoint (bad magic)"));
    }
    let len_bytes: [u8; 8] = bytes.get(4..12).and_then(|s| s.try_into().ok()).ok_or_else(|| bad("truncated header"))?;
    let len = u64::from_le_bytes(len_bytes) as usize;
    let json = bytes.get(12..12usize.saturating_add(len)).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| bad(&format!("manifest: {e}")))?;
    let mut offset = 12 + len;
    let mut params = ParamSet::new();
    for t in &manifest.tensors {
        if t.dtype != "f32" {
            return Err(bad(&format!("tensor {}: unsupported dtype {}", t.name, t.dtype)));
        }
        let n: usize = t.shape.iter().product();
        let raw =
            bytes.get(offset..offset + 4 * n).ok_or_else(|| bad(&format!("truncated data for tensor {}", t.name)))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let value = Tensor::new(&t.shape, data)?;
        if t.trainable {
            params.add(&t.name, value)?;
        } else {
            params.add_buffer(&t.name, value)?;
        }
        offset += 4 * n;
    }
    if offset != bytes.len() {
        return Err(bad(&format!("{} trailing bytes after tensor data", bytes.len() - offset)));
    }
    let config_hash = hex::encode(Sha256::digest(json));
    Ok(Checkpoint { manifest, params, config_hash })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| EbrError::io(path, e))?;
    let ckpt = decode(path, &bytes)?;
    // refuse parameter sets that do not fit the stored tower layout
    ckpt.model()?;
    Ok(ckpt)
}
