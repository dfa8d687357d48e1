//! Training objectives: in-batch contrastive relevance loss, engagement BCE on
//! impression pairs, their weighted combination, and the mixed-negatives
//! variant of the contrastive loss.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::{Error, Result, Scalar};

/// Fixed similarity scale applied before softmax / sigmoid.
pub const DEFAULT_SCALE: f64 = 20.0;
/// Floor on log arguments of the engagement BCE.
pub const LOG_FLOOR: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub relevance: f64,
    pub engagement: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { relevance: 0.8, engagement: 0.2 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.relevance >= 0.0 && self.engagement >= 0.0) {
            return Err(Error::Config(format!("loss weights must be non-negative, got {self:?}")));
        }
        Ok(())
    }
}

/// `queries [B, D] x documents [N, D]^T`: cosine similarities for unit-norm rows.
pub fn similarity_matrix<T: Scalar>(g: &mut Graph<T>, queries: Var, documents: Var) -> Result<Var> {
    let dt = g.transpose(documents)?;
    g.matmul(queries, dt)
}

/// Mean over rows of `-log softmax(s * sim)_ii`; positives on the diagonal,
/// every other column of the row acts as an in-batch negative.
pub fn relevance_loss<T: Scalar>(g: &mut Graph<T>, sim: Var, scale: f64) -> Result<Var> {
    let (b, n) = match *g.shape(sim) {
        [b, n] => (b, n),
        ref s => return Err(Error::Shape(format!("similarity matrix must be 2-d, got {s:?}"))),
    };
    if b < 2 {
        return Err(Error::Batch(format!("relevance loss needs at least 2 pairs for in-batch negatives, got {b}")));
    }
    if n < b {
        return Err(Error::Shape(format!("similarity matrix {b}x{n} has fewer columns than rows")));
    }
    let logits = g.scale(sim, T::of(scale));
    let targets: Vec<usize> = (0..b).collect();
    g.softmax_cross_entropy(logits, &targets)
}

/// Appends `R` random-negative similarity columns to the `B x B` in-batch matrix.
pub fn mixed_batch_logits<T: Scalar>(g: &mut Graph<T>, sim: Var, random_negatives: Var) -> Result<Var> {
    let (b, rb) = (g.shape(sim)[0], g.shape(random_negatives)[0]);
    if g.shape(sim).len() != 2 || g.shape(random_negatives).len() != 2 || b != rb {
        return Err(Error::Shape(format!(
            "mixed batch: in-batch {:?} and random {:?} must share rows",
            g.shape(sim),
            g.shape(random_negatives)
        )));
    }
    g.concat_cols(&[sim, random_negatives])
}

/// Relevance loss over in-batch plus random negatives. With no random
/// columns this is exactly [`relevance_loss`].
pub fn mixed_batch_loss<T: Scalar>(
    g: &mut Graph<T>,
    sim: Var,
    random_negatives: Option<Var>,
    scale: f64,
) -> Result<Var> {
    match random_negatives {
        Some(r) if g.shape(r).get(1).copied().unwrap_or(0) > 0 => {
            let joined = mixed_batch_logits(g, sim, r)?;
            relevance_loss(g, joined, scale)
        }
        _ => relevance_loss(g, sim, scale),
    }
}

/// Mean BCE of `sigmoid(s * kappa)` against engagement labels.
pub fn engagement_loss<T: Scalar>(g: &mut Graph<T>, kappa: Var, labels: &[T], scale: f64) -> Result<Var> {
    let logits = g.scale(kappa, T::of(scale));
    g.sigmoid_bce(logits, labels, T::of(LOG_FLOOR))
}

/// `w.relevance * relevance + w.engagement * engagement`.
pub fn multitask_loss<T: Scalar>(g: &mut Graph<T>, relevance: Var, engagement: Var, w: LossWeights) -> Result<Var> {
    let a = g.scale(relevance, T::of(w.relevance));
    let b = g.scale(engagement, T::of(w.engagement));
    g.add(a, b)
}
