//! One-JSON-record-per-line dataset files.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ebr_core::data::{Dataset, InteractionRecord, ProductDocument, QueryRecord};
use ebr_core::eval::LabeledPair;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{EbrError, Result};

pub const PRODUCTS: &str = "products.jsonl";
pub const QUERIES: &str = "queries.jsonl";
pub const INTERACTIONS: &str = "interactions.jsonl";
pub const RELEVANCE: &str = "relevance.jsonl";
pub const MANIFEST: &str = "dataset.json";

/// Describes a generated data directory, including the held-out day.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub products: usize,
    pub queries: usize,
    pub impressions: usize,
    pub relevance_pairs: usize,
    pub categories: usize,
    pub image_vec_dim: usize,
    pub days: u32,
    pub eval_day: u32,
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| EbrError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| EbrError::format(path, e.to_string()))?;
        w.write_all(b"\n").map_err(|e| EbrError::io(path, e))?;
    }
    w.flush().map_err(|e| EbrError::io(path, e))
}

/// Parses every non-blank line; errors carry the 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| EbrError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| EbrError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| EbrError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| EbrError::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| EbrError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| EbrError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| EbrError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn join(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

pub fn write_dataset(dir: &Path, dataset: &Dataset, manifest: &DatasetManifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| EbrError::io(dir, e))?;
    write_jsonl(&join(dir, PRODUCTS), &dataset.products)?;
    write_jsonl(&join(dir, QUERIES), &dataset.queries)?;
    write_jsonl(&join(dir, INTERACTIONS), &dataset.interactions)?;
    write_jsonl(&join(dir, RELEVANCE), &dataset.relevance)?;
    write_json(&join(dir, MANIFEST), manifest)
}

/// The manifest of a data directory, if it has one.
pub fn read_manifest(dir: &Path) -> Result<Option<DatasetManifest>> {
    let path = join(dir, MANIFEST);
    if !path.exists() {
        return Ok(None);
    }
    read_json(&path).map(Some)
}

/// Reads and validates a data directory. The relevance file is optional.
/// Categories and image width come from the manifest when present.
pub fn read_dataset(dir: &Path, categories: usize, image_dim: usize) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(EbrError::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "data directory not found")));
    }
    let products: Vec<ProductDocument> = read_jsonl(&join(dir, PRODUCTS))?;
    let queries: Vec<QueryRecord> = read_jsonl(&join(dir, QUERIES))?;
    let interactions: Vec<InteractionRecord> = read_jsonl(&join(dir, INTERACTIONS))?;
    let rel_path = join(dir, RELEVANCE);
    let relevance: Vec<LabeledPair> = if rel_path.exists() { read_jsonl(&rel_path)? } else { Vec::new() };
    let (categories, image_dim) = match read_manifest(dir)? {
        Some(m) => (m.categories, m.image_vec_dim),
        None => (categories, image_dim),
    };
    let dataset = Dataset { products, queries, interactions, relevance };
    dataset.validate(categories, image_dim)?;
    Ok(dataset)
}
