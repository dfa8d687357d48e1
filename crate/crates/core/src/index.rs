//! Cosine-similarity retrieval over unit-norm document embeddings.
//!
//! [`IndexMode::Exact`] scans every row. [`IndexMode::Ivf`] clusters the
//! corpus with spherical k-means and scans only the lists of the clusters
//! whose centroids are closest to the query.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::stream;
use crate::scalar::{gemm, MatRef};
use crate::{Error, Result};

pub const KMEANS_ITERATIONS: usize = 25;
pub const KMEANS_SEED: u64 = 0x1f5;
/// Allowed deviation of a stored row's L2 norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-5;
/// Queries come from the same towers but may be re-normalized in f32 by callers.
const QUERY_NORM_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexMode {
    Exact,
    Ivf { clusters: usize, probes: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub id: u64,
    pub score: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    ids: Vec<u64>,
    dim: usize,
    embeddings: Vec<f32>,
    mode: IndexMode,
    centroids: Vec<f32>,
    lists: Vec<Vec<u32>>,
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

fn norm(v: &[f32]) -> f64 {
    libm::sqrt(v.iter().map(|&x| (x as f64) * (x as f64)).sum())
}

fn normalize(v: &mut [f32]) {
    let n = norm(v).max(1e-12) as f32;
    v.iter_mut().for_each(|x| *x /= n);
}

/// Descending score, then ascending id.
fn rank_order(a: &Hit, b: &Hit) -> Ordering {
    b.score.total_cmp(&a.score).then(a.id.cmp(&b.id))
}

impl RetrievalIndex {
    /// Builds an index over row-major `embeddings` (`ids.len() x dim`).
    pub fn build(ids: Vec<u64>, embeddings: Vec<f32>, dim: usize, mode: IndexMode) -> Result<Self> {
        Self::build_seeded(ids, embeddings, dim, mode, KMEANS_SEED)
    }

    pub fn build_seeded(ids: Vec<u64>, embeddings: Vec<f32>, dim: usize, mode: IndexMode, seed: u64) -> Result<Self> {
        let n = ids.len();
        if n == 0 || dim == 0 {
            return Err(Error::Input("index needs at least one embedding of positive dimension".into()));
        }
        if embeddings.len() != n * dim {
            return Err(Error::Shape(format!("{} ids but {} floats for dimension {dim}", n, embeddings.len())));
        }
        for (r, row) in embeddings.chunks(dim).enumerate() {
            let nr = norm(row);
            if !(libm::fabs(nr - 1.0) <= NORM_TOLERANCE) {
                return Err(Error::Input(format!("embedding {} (id {}) has norm {nr}, expected 1", r, ids[r])));
            }
        }
        let (centroids, lists) = match mode {
            IndexMode::Exact => (Vec::new(), Vec::new()),
            IndexMode::Ivf { clusters, probes } => {
                if clusters == 0 || clusters > n {
                    return Err(Error::Config(format!("ivf needs 1 <= clusters <= {n}, got {clusters}")));
                }
                if probes == 0 || probes > clusters {
                    return Err(Error::Config(format!("ivf needs 1 <= probes <= {clusters}, got {probes}")));
                }
                let centroids = spherical_kmeans(&embeddings, dim, clusters, KMEANS_ITERATIONS, seed);
                let assign = assign(&embeddings, dim, &centroids);
                let mut lists = vec![Vec::new(); clusters];
                for (row, &c) in assign.iter().enumerate() {
                    lists[c].push(row as u32);
                }
                (centroids, lists)
            }
        };
        Ok(Self { ids, dim, embeddings, mode, centroids, lists })
    }

    /// Reassembles a previously built index, re-checking its invariants.
    pub fn from_parts(
        ids: Vec<u64>,
        dim: usize,
        embeddings: Vec<f32>,
        mode: IndexMode,
        centroids: Vec<f32>,
        lists: Vec<Vec<u32>>,
    ) -> Result<Self> {
        let n = ids.len();
        if n == 0 || dim == 0 || embeddings.len() != n * dim {
            return Err(Error::Shape(format!("index parts: {n} ids, dim {dim}, {} floats", embeddings.len())));
        }
        match mode {
            IndexMode::Exact => {
                if !centroids.is_empty() || !lists.is_empty() {
                    return Err(Error::Shape("exact index carries no clusters".into()));
                }
            }
            IndexMode::Ivf { clusters, probes } => {
                if centroids.len() != clusters * dim || lists.len() != clusters || probes == 0 || probes > clusters {
                    return Err(Error::Shape(format!("ivf parts inconsistent with {clusters} clusters")));
                }
                let mut seen = vec![false; n];
                for &r in lists.iter().flatten() {
                    let slot =
                        seen.get_mut(r as usize).ok_or_else(|| Error::Index(format!("posting entry {r} >= {n}")))?;
                    if core::mem::replace(slot, true) {
                        return Err(Error::Index(format!("row {r} appears in two posting lists")));
                    }
                }
                if seen.iter().any(|s| !s) {
                    return Err(Error::Index("posting lists do not cover every row".into()));
                }
            }
        }
        Ok(Self { ids, dim, embeddings, mode, centroids, lists })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> IndexMode {
        self.mode
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn embeddings(&self) -> &[f32] {
        &self.embeddings
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn lists(&self) -> &[Vec<u32>] {
        &self.lists
    }

    /// Same index with a different probe count.
    pub fn with_probes(&self, probes: usize) -> Result<Self> {
        match self.mode {
            IndexMode::Exact => Err(Error::Config("exact index has no probes".into())),
            IndexMode::Ivf { clusters, .. } if probes == 0 || probes > clusters => {
                Err(Error::Config(format!("probes must be in 1..={clusters}, got {probes}")))
            }
            IndexMode::Ivf { clusters, .. } => Ok(Self { mode: IndexMode::Ivf { clusters, probes }, ..self.clone() }),
        }
    }

    /// Top `k` documents by dot product, descending, ties by ascending id.
    /// Returns fewer than `k` hits when fewer candidates exist.
    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<Hit>> {
        if k < 1 {
            return Err(Error::Input("k must be at least 1".into()));
        }
        if query.len() != self.dim {
            return Err(Error::Shape(format!("query has dimension {}, index {}", query.len(), self.dim)));
        }
        let nq = norm(query);
        if !(libm::fabs(nq - 1.0) <= QUERY_NORM_TOLERANCE) {
            return Err(Error::Input(format!("query norm {nq}, expected 1")));
        }
        let score =
            |r: usize| Hit { id: self.ids[r], score: dot(query, &self.embeddings[r * self.dim..(r + 1) * self.dim]) };
        let mut hits: Vec<Hit> = match self.mode {
            IndexMode::Exact => (0..self.len()).map(score).collect(),
            IndexMode::Ivf { probes, .. } => {
                let mut order: Vec<(f32, usize)> =
                    self.centroids.chunks(self.dim).enumerate().map(|(c, cen)| (dot(query, cen), c)).collect();
                order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                order[..probes].iter().flat_map(|&(_, c)| self.lists[c].iter().map(|&r| score(r as usize))).collect()
            }
        };
        hits.sort_by(rank_order);
        hits.truncate(k);
        Ok(hits)
    }
}

/// Mean over queries of `|approx top-k ∩ exact top-k| / k`.
pub fn recall_at_k(approx: &RetrievalIndex, exact: &RetrievalIndex, queries: &[Vec<f32>], k: usize) -> Result<f64> {
    if approx.ids != exact.ids || approx.dim != exact.dim || approx.embeddings != exact.embeddings {
        return Err(Error::Input("recall needs two indexes over the same corpus".into()));
    }
    if queries.is_empty() {
        return Err(Error::Input("recall needs at least one query".into()));
    }
    let mut total = 0.0;
    for q in queries {
        let truth: Vec<u64> = exact.search(q, k)?.iter().map(|h| h.id).collect();
        let found = approx.search(q, k)?;
        total += found.iter().filter(|h| truth.contains(&h.id)).count() as f64 / k as f64;
    }
    Ok(total / queries.len() as f64)
}

/// Row-wise nearest centroid by dot product, ties to the lower index.
fn assign(points: &[f32], dim: usize, centroids: &[f32]) -> Vec<usize> {
    let n = points.len() / dim;
    let k = centroids.len() / dim;
    let mut out = Vec::with_capacity(n);
    const CHUNK: usize = 1024;
    let mut sims = vec![0.0f32; CHUNK * k];
    for start in (0..n).step_by(CHUNK) {
        let rows = CHUNK.min(n - start);
        let a = MatRef::new(&points[start * dim..(start + rows) * dim], rows, dim, dim);
        let b = MatRef::new(centroids, k, dim, dim).t();
        gemm(1.0, a, b, 0.0, &mut sims[..rows * k], k);
        for r in 0..rows {
            let row = &sims[r * k..(r + 1) * k];
            let mut best = 0;
            for c in 1..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    out
}

/// k-means++ seeding followed by Lloyd iterations with re-normalized centroids.
fn spherical_kmeans(points: &[f32], dim: usize, k: usize, iterations: usize, seed: u64) -> Vec<f32> {
    let n = points.len() / dim;
    let row = |r: usize| &points[r * dim..(r + 1) * dim];
    let mut rng = stream(seed, "kmeans");
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(row(first));
    // cosine distance 1 - <x, c>, clamped against rounding
    let mut dist: Vec<f64> = (0..n).map(|r| (1.0 - dot(row(r), row(first)) as f64).max(0.0)).collect();
    for _ in 1..k {
        let total: f64 = dist.iter().map(|d| d * d).sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (r, d) in dist.iter().enumerate() {
                u -= d * d;
                if u <= 0.0 && *d > 0.0 {
                    pick = r;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.extend_from_slice(row(pick));
        for r in 0..n {
            let d = (1.0 - dot(row(r), row(pick)) as f64).max(0.0);
            if d < dist[r] {
                dist[r] = d;
            }
        }
    }

    for _ in 0..iterations {
        let labels = assign(points, dim, &centroids);
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (r, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            for (s, &x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row(r)) {
                *s += x as f64;
            }
        }
        // empty clusters take the point least similar to its own centroid
        let mut taken = vec![false; n];
        for c in 0..k {
            let cen = &mut centroids[c * dim..(c + 1) * dim];
            if counts[c] > 0 {
                for (dst, s) in cen.iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *dst = *s as f32;
                }
                normalize(cen);
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut worst: Option<(f32, usize)> = None;
            for (r, &l) in labels.iter().enumerate() {
                if taken[r] || counts[l] < 2 {
                    continue;
                }
                let s = dot(row(r), &centroids[l * dim..(l + 1) * dim]);
                if worst.is_none_or(|(ws, _)| s < ws) {
                    worst = Some((s, r));
                }
            }
            if let Some((_, r)) = worst {
                taken[r] = true;
                counts[labels[r]] -= 1;
                centroids[c * dim..(c + 1) * dim].copy_from_slice(row(r));
            }
        }
    }
    centroids
}
