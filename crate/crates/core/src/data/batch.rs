use alloc::format;
use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};

use super::InteractionRecord;
use crate::eval::LabeledPair;
use crate::rng::{stream, ChaCha8Rng};
use crate::{Error, Result};

/// One optimisation step's worth of examples.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    /// Engaged `(query_id, product_id)` pairs; the positives of the in-batch softmax.
    pub pairs: Vec<(u64, u64)>,
    /// Displayed impressions labelled engaged (1) or not (0).
    pub impressions: Vec<LabeledPair>,
}

/// Epoch-wise sampler over a fixed interaction log.
///
/// Every epoch visits each engaged interaction exactly once, in an order
/// shuffled by the sampler's private stream. A trailing chunk too small to
/// have in-batch negatives is folded into the previous batch.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    engaged: Vec<(u64, u64)>,
    positives: Vec<LabeledPair>,
    negatives: Vec<LabeledPair>,
    batch_size: usize,
    impressions: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(interactions: &[InteractionRecord], batch_size: usize, impressions: usize, seed: u64) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::Config(format!("batch size must be at least 2, got {batch_size}")));
        }
        let mut engaged = Vec::new();
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for i in interactions {
            i.validate()?;
            if !i.displayed {
                continue;
            }
            let pair = LabeledPair { query_id: i.query_id, product_id: i.product_id, label: i.engaged as u8 };
            if i.engaged {
                engaged.push((i.query_id, i.product_id));
                positives.push(pair);
            } else {
                negatives.push(pair);
            }
        }
        if engaged.len() < batch_size {
            return Err(Error::Data(format!(
                "need at least {batch_size} engaged interactions for one batch, found {} (short by {})",
                engaged.len(),
                batch_size - engaged.len()
            )));
        }
        let displayed = positives.len() + negatives.len();
        if displayed < impressions {
            return Err(Error::Data(format!(
                "need {impressions} displayed interactions per engagement sub-batch, found {displayed} (short by {})",
                impressions - displayed
            )));
        }
        Ok(Self { engaged, positives, negatives, batch_size, impressions, rng: stream(seed, "batches") })
    }

    pub fn engaged_count(&self) -> usize {
        self.engaged.len()
    }

    pub fn steps_per_epoch(&self) -> usize {
        let n = self.engaged.len();
        n / self.batch_size + usize::from(n % self.batch_size >= 2)
    }

    /// Batches of the next epoch, in order.
    pub fn epoch(&mut self) -> Vec<TrainingBatch> {
        let mut order = self.engaged.clone();
        order.shuffle(&mut self.rng);
        let mut chunks: Vec<Vec<(u64, u64)>> = order.chunks(self.batch_size).map(<[_]>::to_vec).collect();
        if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < 2) {
            let tail = chunks.pop().unwrap_or_default();
            if let Some(prev) = chunks.last_mut() {
                prev.extend(tail);
            }
        }
        chunks.into_iter().map(|pairs| TrainingBatch { pairs, impressions: self.impression_batch() }).collect()
    }

    /// `impressions / 2` engaged and `impressions / 2` non-engaged impressions,
    /// topped up from whichever side has spare rows when the other runs short.
    fn impression_batch(&mut self) -> Vec<LabeledPair> {
        let h = self.impressions;
        let want_neg = h / 2;
        let want_pos = h - want_neg;
        let n_pos = want_pos.min(self.positives.len()).max(h.saturating_sub(self.negatives.len()));
        let n_neg = h - n_pos;
        let mut out = Vec::with_capacity(h);
        for i in index::sample(&mut self.rng, self.positives.len(), n_pos).into_iter() {
            out.push(self.positives[i]);
        }
        for i in index::sample(&mut self.rng, self.negatives.len(), n_neg).into_iter() {
            out.push(self.negatives[i]);
        }
        out
    }
}
