//! Training loop and the experiment arms.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, Graph, OptimizerState, ParamSet};
use crate::data::{BatchSampler, Dataset, TrainingBatch};
use crate::eval::{evaluate_multitask, LabeledPair, ModelScorer, MultitaskAuc};
use crate::losses::{engagement_loss, mixed_batch_loss, multitask_loss, similarity_matrix, LossWeights, DEFAULT_SCALE};
use crate::nn::Mode;
use crate::rng::{stream, ChaCha8Rng};
use crate::towers::{DocumentInput, ModalityDropout, QueryInput, TowerConfig, TwoTowerModel};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// In-batch negatives only.
    Vanilla,
    /// In-batch plus random catalog negatives.
    MixedBatch,
    /// Relevance plus engagement loss.
    Multitask,
    /// Multitask with modality dropout on the document tower.
    MultitaskDropout,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Vanilla, Arm::MixedBatch, Arm::Multitask, Arm::MultitaskDropout];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Vanilla => "vanilla",
            Arm::MixedBatch => "mixed_batch",
            Arm::Multitask => "multitask",
            Arm::MultitaskDropout => "multitask_dropout",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            Error::Config(format!("unknown arm {s:?} (expected vanilla, mixed_batch, multitask or multitask_dropout)"))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub arm: Arm,
    pub batch_size: usize,
    /// Impressions per step for the engagement loss.
    pub engagement_batch: usize,
    /// Random catalog negatives per step; `None` means `batch_size` for the
    /// mixed and multitask arms and 0 for vanilla.
    pub random_negatives: Option<usize>,
    pub epochs: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub scale: f64,
    /// Modality dropout override; `None` uses the arm's default.
    pub dropout: Option<ModalityDropout>,
    pub tower: TowerConfig,
    /// Day held out for engagement evaluation; training uses earlier days.
    pub eval_day: u32,
    pub data_dir: String,
    /// Rows per inference forward pass during evaluation.
    pub eval_chunk: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            arm: Arm::MultitaskDropout,
            batch_size: 128,
            engagement_batch: 128,
            random_negatives: None,
            epochs: 3,
            seed: 1,
            learning_rate: 4e-4,
            weights: LossWeights::default(),
            scale: DEFAULT_SCALE,
            dropout: None,
            tower: TowerConfig::default(),
            eval_day: 9,
            data_dir: "data".to_string(),
            eval_chunk: 256,
        }
    }
}

/// What one training step optimises, after applying the arm's rules.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub weights: LossWeights,
    pub scale: f64,
    pub random_negatives: usize,
    pub dropout: ModalityDropout,
}

impl Objective {
    pub fn uses_engagement(&self) -> bool {
        self.weights.engagement > 0.0
    }
}

impl RunConfig {
    pub fn objective(&self) -> Result<Objective> {
        self.weights.validate()?;
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Config(format!("scale must be positive, got {}", self.scale)));
        }
        let reject = |m: String| Err(Error::Config(format!("arm {}: {m}", self.arm)));
        let (engagement, random_negatives) = match self.arm {
            Arm::Vanilla => match self.random_negatives {
                Some(r) if r > 0 => return reject(format!("random_negatives must be 0, got {r}")),
                _ => (0.0, 0),
            },
            Arm::MixedBatch => match self.random_negatives {
                Some(0) => return reject("random_negatives must be positive".into()),
                r => (0.0, r.unwrap_or(self.batch_size)),
            },
            Arm::Multitask | Arm::MultitaskDropout => {
                if self.weights.engagement <= 0.0 {
                    return reject("engagement weight must be positive".into());
                }
                (self.weights.engagement, self.random_negatives.unwrap_or(self.batch_size))
            }
        };
        let dropout = self.dropout.unwrap_or(match self.arm {
            Arm::MultitaskDropout => ModalityDropout::MARKETPLACE,
            _ => ModalityDropout::NONE,
        });
        dropout.validate()?;
        Ok(Objective {
            weights: LossWeights { relevance: self.weights.relevance, engagement },
            scale: self.scale,
            random_negatives,
            dropout,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        let objective = self.objective()?;
        if objective.uses_engagement() && self.engagement_batch == 0 {
            return Err(Error::Config("engagement arms need engagement_batch > 0".into()));
        }
        self.tower.validate()
    }

    /// The tower configuration with the arm's modality dropout applied.
    pub fn effective_tower(&self) -> Result<TowerConfig> {
        let mut tower = self.tower.clone();
        tower.dropout = self.objective()?.dropout;
        Ok(tower)
    }
}

/// One row of the step-level loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub relevance: f64,
    /// `None` for arms without the engagement task.
    pub engagement: Option<f64>,
    pub total: f64,
}

/// Model-ready inputs keyed by record id.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub queries: BTreeMap<u64, QueryInput>,
    pub documents: BTreeMap<u64, DocumentInput>,
}

impl PreparedData {
    pub fn new(dataset: &Dataset, tower: &TowerConfig) -> Result<Self> {
        Ok(Self { queries: dataset.query_inputs(tower)?, documents: dataset.document_inputs(tower) })
    }
}

/// Owns parameters, optimizer state and every random stream of one run.
pub struct Trainer<'a> {
    pub model: TwoTowerModel,
    pub params: ParamSet<f32>,
    pub optimizer: OptimizerState<f32>,
    pub objective: Objective,
    pub sampler: BatchSampler,
    data: &'a PreparedData,
    catalog: Vec<u64>,
    negative_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    step: u64,
}

impl<'a> Trainer<'a> {
    /// Fresh model for `config`, trained on `interactions` with `objective`
    /// (normally `config.objective()`).
    pub fn new(
        config: &RunConfig,
        objective: Objective,
        data: &'a PreparedData,
        interactions: &[crate::data::InteractionRecord],
    ) -> Result<Self> {
        let mut tower = config.tower.clone();
        tower.dropout = objective.dropout;
        let mut params = ParamSet::new();
        let model = TwoTowerModel::new(tower, &mut params, &mut stream(config.seed, "init"))?;
        let impressions = if objective.uses_engagement() { config.engagement_batch } else { 0 };
        let sampler = BatchSampler::new(interactions, config.batch_size, impressions, config.seed)?;
        let optimizer = OptimizerState::new(&params, AdamConfig { lr: config.learning_rate, ..AdamConfig::default() });
        Ok(Self {
            model,
            params,
            optimizer,
            objective,
            sampler,
            data,
            catalog: data.documents.keys().copied().collect(),
            negative_rng: stream(config.seed, "random-negatives"),
            dropout_rng: stream(config.seed, "modality-dropout"),
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    fn query(&self, id: u64) -> Result<&'a QueryInput> {
        self.data.queries.get(&id).ok_or_else(|| Error::Data(format!("unknown query id {id}")))
    }

    fn document(&self, id: u64) -> Result<&'a DocumentInput> {
        self.data.documents.get(&id).ok_or_else(|| Error::Data(format!("unknown product id {id}")))
    }

    /// Loss of `batch` under the current parameters, without updating them.
    pub fn loss(&mut self, batch: &TrainingBatch) -> Result<LossRecord> {
        let (record, _) = self.forward_backward(batch, false)?;
        Ok(record)
    }

    /// One optimisation step. Parameters are untouched when the loss or any
    /// gradient is non-finite.
    pub fn step(&mut self, batch: &TrainingBatch) -> Result<LossRecord> {
        let (record, update) = self.forward_backward(batch, true)?;
        if let Some((grads, stats_graph)) = update {
            self.optimizer.step(&mut self.params, &grads)?;
            let (g, enc) = stats_graph;
            self.model.absorb_batch_stats(&g, &mut self.params, &enc);
        }
        self.step += 1;
        Ok(record)
    }

    #[allow(clippy::type_complexity)]
    fn forward_backward(
        &mut self,
        batch: &TrainingBatch,
        with_grads: bool,
    ) -> Result<(LossRecord, Option<(crate::autodiff::ParamGrads<f32>, (Graph<f32>, crate::towers::DocumentEncoding))>)>
    {
        let b = batch.pairs.len();
        let engagement = self.objective.uses_engagement();
        let h = if engagement { batch.impressions.len() } else { 0 };
        let r = self.objective.random_negatives.min(self.catalog.len());

        let mut q_in = Vec::with_capacity(b + h);
        let mut d_in = Vec::with_capacity(b + h + r);
        for &(q, p) in &batch.pairs {
            q_in.push(self.query(q)?);
            d_in.push(self.document(p)?);
        }
        if engagement {
            for pair in &batch.impressions {
                q_in.push(self.query(pair.query_id)?);
                d_in.push(self.document(pair.product_id)?);
            }
        }
        if r > 0 {
            for i in index::sample(&mut self.negative_rng, self.catalog.len(), r).into_iter() {
                d_in.push(self.document(self.catalog[i])?);
            }
        }

        let mut g = Graph::new();
        let q = self.model.encode_queries(&mut g, &self.params, &q_in)?;
        let enc = self.model.encode_documents(&mut g, &self.params, &d_in, Mode::Train, &mut self.dropout_rng)?;
        let rows = |from: usize, n: usize| (from..from + n).collect::<Vec<usize>>();
        let q_pos = g.gather_rows(q, &rows(0, b))?;
        let d_pos = g.gather_rows(enc.embeddings, &rows(0, b))?;
        let sim = similarity_matrix(&mut g, q_pos, d_pos)?;
        let random = if r > 0 {
            let d_rand = g.gather_rows(enc.embeddings, &rows(b + h, r))?;
            Some(similarity_matrix(&mut g, q_pos, d_rand)?)
        } else {
            None
        };
        let l_rel = mixed_batch_loss(&mut g, sim, random, self.objective.scale)?;
        let (l_eng, total) = if engagement {
            let qi = g.gather_rows(q, &rows(b, h))?;
            let di = g.gather_rows(enc.embeddings, &rows(b, h))?;
            let kappa = g.row_dot(qi, di)?;
            let labels: Vec<f32> = batch.impressions.iter().map(|p| p.label as f32).collect();
            let l_eng = engagement_loss(&mut g, kappa, &labels, self.objective.scale)?;
            (Some(l_eng), multitask_loss(&mut g, l_rel, l_eng, self.objective.weights)?)
        } else {
            (None, g.scale(l_rel, self.objective.weights.relevance as f32))
        };
        let record = LossRecord {
            step: self.step,
            relevance: g.value(l_rel).item() as f64,
            engagement: l_eng.map(|v| g.value(v).item() as f64),
            total: g.value(total).item() as f64,
        };
        if !record.total.is_finite() {
            return Err(Error::NonFinite(format!("loss is {} at step {}", record.total, self.step)));
        }
        if !with_grads {
            return Ok((record, None));
        }
        let grads = g.backward(total)?.param_grads(&self.params);
        for id in self.params.trainable_ids() {
            if grads.get(id).is_some_and(|t| !t.all_finite()) {
                return Err(Error::NonFinite(format!("gradient of {} at step {}", self.params.name(id), self.step)));
            }
        }
        Ok((record, Some((grads, (g, enc)))))
    }
}

/// Why a run stopped early.
#[derive(Clone, Debug, PartialEq)]
pub struct Abort {
    pub step: u64,
    pub reason: String,
}

/// Parameters (the last finite ones if the run aborted) and the loss log.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: TwoTowerModel,
    pub params: ParamSet<f32>,
    pub log: Vec<LossRecord>,
    pub epochs_completed: usize,
    pub aborted: Option<Abort>,
}

/// Trains `config` on the days before `config.eval_day`. `on_epoch` runs
/// after every completed epoch (e.g. to write a checkpoint).
pub fn train<F>(config: &RunConfig, dataset: &Dataset, data: &PreparedData, mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(usize, &TwoTowerModel, &ParamSet<f32>) -> Result<()>,
{
    config.validate()?;
    let interactions = dataset.training_interactions(config.eval_day);
    let mut trainer = Trainer::new(config, config.objective()?, data, &interactions)?;
    let mut log = Vec::new();
    let mut aborted = None;
    let mut epochs_completed = 0;
    'epochs: for epoch in 0..config.epochs {
        for batch in trainer.sampler.epoch() {
            match trainer.step(&batch) {
                Ok(rec) => log.push(rec),
                Err(Error::NonFinite(reason)) => {
                    log::error!("aborting at step {}: {reason}", trainer.steps_taken());
                    aborted = Some(Abort { step: trainer.steps_taken(), reason });
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        epochs_completed = epoch + 1;
        on_epoch(epoch, &trainer.model, &trainer.params)?;
    }
    Ok(TrainOutcome { model: trainer.model, params: trainer.params, log, epochs_completed, aborted })
}

/// Both AUCs of a frozen model: relevance on the labelled set, engagement on
/// impressions of the held-out day.
pub fn evaluate(
    model: &TwoTowerModel,
    params: &ParamSet<f32>,
    dataset: &Dataset,
    data: &PreparedData,
    eval_day: u32,
    chunk: usize,
) -> Result<MultitaskAuc> {
    let scorer = ModelScorer { model, params, queries: &data.queries, documents: &data.documents, chunk };
    let engagement: Vec<LabeledPair> = dataset.engagement_pairs(eval_day);
    evaluate_multitask(&scorer, &dataset.relevance, &engagement)
}

/// Median of a non-empty sample (mean of the middle two for even sizes).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median AUCs of one arm over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub engagement_auc: f64,
    pub relevance_auc: f64,
    pub seeds: Vec<u64>,
    pub engagement_per_seed: Vec<f64>,
    pub relevance_per_seed: Vec<f64>,
}

impl ArmSummary {
    pub fn from_runs(arm: Arm, runs: &[(u64, MultitaskAuc)]) -> Self {
        let eng: Vec<f64> = runs.iter().map(|(_, a)| a.engagement_auc).collect();
        let rel: Vec<f64> = runs.iter().map(|(_, a)| a.relevance_auc).collect();
        Self {
            arm,
            engagement_auc: median(&eng),
            relevance_auc: median(&rel),
            seeds: runs.iter().map(|(s, _)| *s).collect(),
            engagement_per_seed: eng,
            relevance_per_seed: rel,
        }
    }
}
