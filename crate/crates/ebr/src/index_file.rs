//! `Q2EI` index files and raw embedding matrices.
//!
//! Index layout (little-endian): magic `Q2EI`, `u32` version, `u8` mode tag
//! (0 exact, 1 ivf), `u64` n, `u64` dim, for ivf `u64` clusters and `u64`
//! probes; then `n` `u64` ids, `n * dim` `f32` embeddings and for ivf the
//! `clusters * dim` centroids followed by each posting list as a `u64`
//! length and that many `u32` row numbers.

use std::fs;
use std::path::{Path, PathBuf};

use ebr_core::index::{IndexMode, RetrievalIndex};
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{EbrError, Result};

pub const MAGIC: &[u8; 4] = b"Q2EI";
pub const VERSION: u32 = 1;

pub fn encode(index: &RetrievalIndex) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let (tag, extra) = match index.mode() {
        IndexMode::Exact => (0u8, None),
        IndexMode::Ivf { clusters, probes } => (1u8, Some((clusters, probes))),
    };
    out.push(tag);
    out.extend_from_slice(&(index.len() as u64).to_le_bytes());
    out.extend_from_slice(&(index.dim() as u64).to_le_bytes());
    if let Some((c, p)) = extra {
        out.extend_from_slice(&(c as u64).to_le_bytes());
        out.extend_from_slice(&(p as u64).to_le_bytes());
    }
    for id in index.ids() {
        out.extend_from_slice(&id.to_le_bytes());
    }
    for v in index.embeddings().iter().chain(index.centroids()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for list in index.lists() {
        out.extend_from_slice(&(list.len() as u64).to_le_bytes());
        for r in list {
            out.extend_from_slice(&r.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(EbrError::format(self.path, format!("truncated index file at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn size(&mut self) -> Result<usize> {
        let v = self.u64()?;
        // every counted item occupies at least one byte of the remaining input
        if v > self.bytes.len() as u64 {
            return Err(EbrError::format(self.path, format!("implausible count {v}")));
        }
        Ok(v as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| EbrError::format(self.path, "size overflow"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<RetrievalIndex> {
    let mut c = Cursor { bytes, pos: 0, path };
    let magic = c.take(4)?;
    if magic != MAGIC {
        return Err(EbrError::format(path, "not a Q2EI index (bad magic)"));
    }
    let version = u32::from_le_bytes(c.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(EbrError::UnsupportedVersion { path: path.to_path_buf(), found: version.to_string() });
    }
    let tag = c.take(1)?[0];
    let n = c.size()?;
    let dim = c.size()?;
    let mode = match tag {
        0 => IndexMode::Exact,
        1 => {
            let clusters = c.size()?;
            let probes = c.size()?;
            IndexMode::Ivf { clusters, probes }
        }
        t => return Err(EbrError::format(path, format!("unknown mode tag {t}"))),
    };
    let ids = c
        .take(n.checked_mul(8).ok_or_else(|| EbrError::format(path, "size overflow"))?)?
        .chunks_exact(8)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    let embeddings = c.f32s(n * dim)?;
    let (centroids, lists) = match mode {
        IndexMode::Exact => (Vec::new(), Vec::new()),
        IndexMode::Ivf { clusters, .. } => {
            let centroids = c.f32s(clusters * dim)?;
            let mut lists = Vec::with_capacity(clusters);
            for _ in 0..clusters {
                let len = c.size()?;
                let raw = c.take(len * 4)?;
                lists.push(raw.chunks_exact(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect());
            }
            (centroids, lists)
        }
    };
    if c.pos != bytes.len() {
        return Err(EbrError::format(path, format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    RetrievalIndex::from_parts(ids, dim, embeddings, mode, centroids, lists)
        .map_err(|e| EbrError::format(path, e.to_string()))
}

pub fn save(path: &Path, index: &RetrievalIndex) -> Result<()> {
    write_atomic(path, &encode(index))
}

pub fn load(path: &Path) -> Result<RetrievalIndex> {
    let bytes = fs::read(path).map_err(|e| EbrError::io(path, e))?;
    decode(path, &bytes)
}

/// JSON sidecar of a raw embedding matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSidecar {
    pub dim: usize,
    pub ids: Vec<u64>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

/// Writes `ids.len() x dim` little-endian `f32` values plus `<path>.json`.
pub fn write_embeddings(path: &Path, ids: &[u64], dim: usize, values: &[f32]) -> Result<()> {
    if values.len() != ids.len() * dim {
        return Err(EbrError::format(
            path,
            format!("{} values for {} ids of dimension {dim}", values.len(), ids.len()),
        ));
    }
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_atomic(path, &bytes)?;
    crate::jsonl::write_json(&sidecar_path(path), &EmbeddingSidecar { dim, ids: ids.to_vec() })
}

pub fn read_embeddings(path: &Path) -> Result<(Vec<u64>, usize, Vec<f32>)> {
    let side: EmbeddingSidecar = crate::jsonl::read_json(&sidecar_path(path))?;
    let bytes = fs::read(path).map_err(|e| EbrError::io(path, e))?;
    if bytes.len() != side.ids.len() * side.dim * 4 {
        return Err(EbrError::format(
            path,
            format!("{} bytes, sidecar describes {} x {} f32 values", bytes.len(), side.ids.len(), side.dim),
        ));
    }
    let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((side.ids, side.dim, values))
}
