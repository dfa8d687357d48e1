//! The four-arm comparison: every arm trained on every seed, evaluated on
//! the held-out day, medians reported per arm.

use ebr_core::data::Dataset;
use ebr_core::eval::MultitaskAuc;
use ebr_core::training::{self, Arm, ArmSummary, PreparedData, RunConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const SEEDS: [u64; 3] = [1, 2, 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub arm: Arm,
    pub seed: u64,
    pub engagement_auc: f64,
    pub relevance_auc: f64,
    pub epochs_completed: usize,
    pub final_loss: Option<f64>,
    pub aborted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table1 {
    pub rows: Vec<ArmSummary>,
    pub runs: Vec<RunResult>,
}

impl Table1 {
    pub fn row(&self, arm: Arm) -> Option<&ArmSummary> {
        self.rows.iter().find(|r| r.arm == arm)
    }
}

/// Worker count from `Q2E_THREADS`, default 1.
pub fn threads() -> usize {
    std::env::var("Q2E_THREADS").ok().and_then(|v| v.trim().parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

fn run_one(base: &RunConfig, dataset: &Dataset, arm: Arm, seed: u64) -> Result<RunResult> {
    let mut config = base.clone();
    config.arm = arm;
    config.seed = seed;
    let tower = config.effective_tower()?;
    let data = PreparedData::new(dataset, &tower)?;
    let started = std::time::Instant::now();
    let outcome = training::train(&config, dataset, &data, |_, _, _| Ok(()))?;
    let auc: MultitaskAuc =
        training::evaluate(&outcome.model, &outcome.params, dataset, &data, config.eval_day, config.eval_chunk)?;
    log::info!(
        "{arm} seed {seed}: engagement {:.4} relevance {:.4} ({:.0?})",
        auc.engagement_auc,
        auc.relevance_auc,
        started.elapsed()
    );
    Ok(RunResult {
        arm,
        seed,
        engagement_auc: auc.engagement_auc,
        relevance_auc: auc.relevance_auc,
        epochs_completed: outcome.epochs_completed,
        final_loss: outcome.log.last().map(|r| r.total),
        aborted: outcome.aborted.is_some(),
    })
}

/// Trains `arms` x `seeds` from `base` on `workers` threads. Results do not
/// depend on the worker count: each run owns its RNG streams.
pub fn run(base: &RunConfig, dataset: &Dataset, arms: &[Arm], seeds: &[u64], workers: usize) -> Result<Table1> {
    let jobs: Vec<(Arm, u64)> = arms.iter().flat_map(|&a| seeds.iter().map(move |&s| (a, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| crate::EbrError::Config(format!("thread pool: {e}")))?;
    let runs: Vec<RunResult> =
        pool.install(|| jobs.par_iter().map(|&(arm, seed)| run_one(base, dataset, arm, seed)).collect::<Result<_>>())?;
    let rows = arms
        .iter()
        .map(|&arm| {
            let per: Vec<(u64, MultitaskAuc)> = runs
                .iter()
                .filter(|r| r.arm == arm)
                .map(|r| {
                    (
                        r.seed,
                        MultitaskAuc {
                            relevance_auc: r.relevance_auc,
                            engagement_auc: r.engagement_auc,
                            n_relevance: 0,
                            n_engagement: 0,
                        },
                    )
                })
                .collect();
            ArmSummary::from_runs(arm, &per)
        })
        .collect();
    Ok(Table1 { rows, runs })
}
