//! Ranking metrics and the two-set (relevance / engagement) evaluation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamSet;
use crate::towers::{DocumentInput, QueryInput, TwoTowerModel};
use crate::{Error, Result};

/// A (query, product) pair with a binary label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub query_id: u64,
    pub product_id: u64,
    pub label: u8,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredPair {
    pub query_id: u64,
    pub product_id: u64,
    pub model_score: f64,
    pub label: u8,
}

/// Area under the ROC curve via the Mann-Whitney U statistic: the fraction of
/// (positive, negative) pairs ordered correctly, ties counting one half.
pub fn roc_auc(pairs: &[ScoredPair]) -> Result<f64> {
    let mut scored: Vec<(f64, bool)> = Vec::with_capacity(pairs.len());
    for p in pairs {
        if p.label > 1 {
            return Err(Error::Label(format!("label {} is not binary", p.label)));
        }
        if !p.model_score.is_finite() {
            return Err(Error::Metric(format!("non-finite score for ({}, {})", p.query_id, p.product_id)));
        }
        scored.push((p.model_score, p.label == 1));
    }
    roc_auc_scores(&scored)
}

/// [`roc_auc`] over raw `(score, is_positive)` pairs.
pub fn roc_auc_scores(scored: &[(f64, bool)]) -> Result<f64> {
    let positives = scored.iter().filter(|s| s.1).count() as u64;
    let negatives = scored.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Metric(format!("ROC AUC needs both classes ({positives} positive, {negatives} negative)")));
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // twice the U statistic, kept integral so ties of 1/2 stay exact
    let mut twice_u: u128 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            if sorted[j].1 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        twice_u += 2 * p as u128 * neg_below as u128 + p as u128 * n as u128;
        neg_below += n;
        i = j;
    }
    Ok(twice_u as f64 / (2 * positives as u128 * negatives as u128) as f64)
}

/// NDCG@k with gain `2^rel - 1` and `log2(rank + 1)` discount. Zero when the
/// ideal DCG is zero.
pub fn ndcg_at_k(labels: &[f64], k: usize) -> f64 {
    let dcg = |ls: &[f64]| -> f64 {
        ls.iter().take(k).enumerate().map(|(i, &r)| (libm::exp2(r) - 1.0) / libm::log2(i as f64 + 2.0)).sum()
    };
    let mut ideal = labels.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg = dcg(&ideal);
    if idcg <= 0.0 {
        0.0
    } else {
        dcg(labels) / idcg
    }
}

/// Anything that can assign a similarity score to (query, product) pairs.
pub trait PairScorer {
    fn score(&self, pairs: &[LabeledPair]) -> Result<Vec<f64>>;
}

pub fn score_pairs<S: PairScorer + ?Sized>(scorer: &S, pairs: &[LabeledPair]) -> Result<Vec<ScoredPair>> {
    let scores = scorer.score(pairs)?;
    Ok(pairs
        .iter()
        .zip(scores)
        .map(|(p, s)| ScoredPair { query_id: p.query_id, product_id: p.product_id, model_score: s, label: p.label })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MultitaskAuc {
    pub relevance_auc: f64,
    pub engagement_auc: f64,
    pub n_relevance: usize,
    pub n_engagement: usize,
}

/// ROC AUC on the relevance-labelled set and on the engagement (impression) set.
pub fn evaluate_multitask<S: PairScorer + ?Sized>(
    scorer: &S,
    relevance: &[LabeledPair],
    engagement: &[LabeledPair],
) -> Result<MultitaskAuc> {
    if relevance.is_empty() || engagement.is_empty() {
        return Err(Error::Data("evaluation needs non-empty relevance and engagement sets".into()));
    }
    let rel = roc_auc(&score_pairs(scorer, relevance)?)?;
    let eng = roc_auc(&score_pairs(scorer, engagement)?)?;
    Ok(MultitaskAuc {
        relevance_auc: rel,
        engagement_auc: eng,
        n_relevance: relevance.len(),
        n_engagement: engagement.len(),
    })
}

/// Serialized evaluation result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub relevance_auc: f64,
    pub engagement_auc: f64,
    pub n_relevance: usize,
    pub n_engagement: usize,
    pub checkpoint: String,
    pub config_hash: String,
}

impl EvalReport {
    pub fn new(auc: MultitaskAuc, checkpoint: String, config_hash: String) -> Self {
        Self {
            relevance_auc: auc.relevance_auc,
            engagement_auc: auc.engagement_auc,
            n_relevance: auc.n_relevance,
            n_engagement: auc.n_engagement,
            checkpoint,
            config_hash,
        }
    }
}

/// Scores pairs with a frozen two-tower model (inference mode). Each distinct
/// query and product is embedded once.
pub struct ModelScorer<'a> {
    pub model: &'a TwoTowerModel,
    pub params: &'a ParamSet<f32>,
    pub queries: &'a BTreeMap<u64, QueryInput>,
    pub documents: &'a BTreeMap<u64, DocumentInput>,
    pub chunk: usize,
}

impl PairScorer for ModelScorer<'_> {
    fn score(&self, pairs: &[LabeledPair]) -> Result<Vec<f64>> {
        let qids: Vec<u64> =
            pairs.iter().map(|p| p.query_id).collect::<alloc::collections::BTreeSet<_>>().into_iter().collect();
        let pids: Vec<u64> =
            pairs.iter().map(|p| p.product_id).collect::<alloc::collections::BTreeSet<_>>().into_iter().collect();
        let q_in = qids
            .iter()
            .map(|id| self.queries.get(id).ok_or_else(|| Error::Data(format!("unknown query id {id}"))))
            .collect::<Result<Vec<_>>>()?;
        let d_in = pids
            .iter()
            .map(|id| self.documents.get(id).ok_or_else(|| Error::Data(format!("unknown product id {id}"))))
            .collect::<Result<Vec<_>>>()?;
        let q_emb = self.model.embed_queries(self.params, &q_in, self.chunk)?;
        let d_emb = self.model.embed_documents(self.params, &d_in, self.chunk)?;
        let q_idx: BTreeMap<u64, usize> = qids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let d_idx: BTreeMap<u64, usize> = pids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        Ok(pairs
            .iter()
            .map(|p| {
                let (q, d) = (&q_emb[q_idx[&p.query_id]], &d_emb[d_idx[&p.product_id]]);
                q.iter().zip(d).map(|(&a, &b)| a * b).sum::<f32>() as f64
            })
            .collect())
    }
}
