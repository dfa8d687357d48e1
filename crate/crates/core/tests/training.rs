use ebr_core::autodiff::ParamSet;
use ebr_core::data::{
    generate_catalog, generate_interactions, generate_relevance_set, Catalog, Dataset, GeneratorConfig,
};
use ebr_core::eval::{evaluate_multitask, LabeledPair, ModelScorer, PairScorer};
use ebr_core::losses::LossWeights;
use ebr_core::towers::{ModalityDropout, TowerConfig};
use ebr_core::training::{median, train, Arm, Objective, PreparedData, RunConfig, Trainer};
use ebr_core::Result;

fn corpus(seed: u64, products: usize, queries: usize, impressions: usize, relevance: usize) -> (Catalog, Dataset) {
    let cfg = GeneratorConfig::default();
    let cat = generate_catalog(seed, products, queries, &cfg).unwrap();
    let inter = generate_interactions(seed, &cat, impressions).unwrap();
    let rel = generate_relevance_set(seed, &cat, relevance).unwrap();
    (cat.clone(), cat.into_dataset(inter, rel))
}

fn all_impressions(ds: &Dataset) -> Vec<LabeledPair> {
    ds.interactions
        .iter()
        .map(|i| LabeledPair { query_id: i.query_id, product_id: i.product_id, label: i.engaged as u8 })
        .collect()
}

fn changed(a: &ParamSet<f32>, b: &ParamSet<f32>, prefix: &str) -> bool {
    a.ids().filter(|&id| a.name(id).starts_with(prefix)).any(|id| a.get(id).data() != b.get(id).data())
}

fn small_tower() -> TowerConfig {
    TowerConfig {
        embedding_dim: 16,
        hidden_dim: 16,
        ff_dim: 16,
        heads: 2,
        fusion_layers: 1,
        trigram_vocab: 256,
        word_vocab: 128,
        ..TowerConfig::default()
    }
}

struct TopicOracle<'a>(&'a Catalog);

impl PairScorer for TopicOracle<'_> {
    fn score(&self, pairs: &[LabeledPair]) -> Result<Vec<f64>> {
        Ok(pairs.iter().map(|p| self.0.topic_similarity(p.query_id as usize, p.product_id as usize)).collect())
    }
}

#[test]
fn topic_oracle_ranks_relevance_almost_perfectly() {
    let (cat, ds) = corpus(11, 5000, 2000, 20_000, 20_000);
    let eng = all_impressions(&ds);
    let auc = evaluate_multitask(&TopicOracle(&cat), &ds.relevance, &eng).unwrap();
    assert!(auc.relevance_auc > 0.95, "{auc:?}");
    // topic alone carries some, not all, of the engagement signal
    assert!(auc.engagement_auc > 0.55 && auc.engagement_auc < 0.9, "{auc:?}");
}

#[test]
fn untrained_model_is_at_chance() {
    let (_, ds) = corpus(12, 3000, 1500, 20_000, 20_000);
    let config = RunConfig::default();
    let data = PreparedData::new(&ds, &config.tower).unwrap();
    let interactions = ds.training_interactions(config.eval_day);
    let trainer = Trainer::new(&config, config.objective().unwrap(), &data, &interactions).unwrap();
    let scorer = ModelScorer {
        model: &trainer.model,
        params: &trainer.params,
        queries: &data.queries,
        documents: &data.documents,
        chunk: 256,
    };
    let eng = all_impressions(&ds);
    assert!(eng.len() >= 20_000 && ds.relevance.len() >= 20_000);
    let auc = evaluate_multitask(&scorer, &ds.relevance, &eng).unwrap();
    for v in [auc.relevance_auc, auc.engagement_auc] {
        assert!((0.45..=0.55).contains(&v), "{auc:?}");
    }
}

#[test]
fn first_vanilla_loss_is_near_log_batch() {
    let (_, ds) = corpus(13, 1500, 600, 8000, 100);
    let config = RunConfig { arm: Arm::Vanilla, ..RunConfig::default() };
    let data = PreparedData::new(&ds, &config.tower).unwrap();
    let interactions = ds.training_interactions(config.eval_day);
    let mut trainer = Trainer::new(&config, config.objective().unwrap(), &data, &interactions).unwrap();
    let batch = trainer.sampler.epoch().remove(0);
    let loss = trainer.loss(&batch).unwrap().relevance;
    let ln_b = (config.batch_size as f64).ln();
    assert!((loss - ln_b).abs() < 0.2 * ln_b, "step-0 loss {loss} vs ln B {ln_b}");
}

#[test]
fn multitask_without_engagement_steps_like_vanilla() {
    let (_, ds) = corpus(14, 600, 300, 4000, 100);
    let tower = small_tower();
    let vanilla = RunConfig { arm: Arm::Vanilla, batch_size: 16, tower: tower.clone(), ..RunConfig::default() };
    let multitask = RunConfig { arm: Arm::Multitask, ..vanilla.clone() };
    let data = PreparedData::new(&ds, &tower).unwrap();
    let interactions = ds.training_interactions(vanilla.eval_day);
    let reduced = Objective {
        weights: LossWeights { relevance: multitask.weights.relevance, engagement: 0.0 },
        scale: multitask.scale,
        random_negatives: 0,
        dropout: ModalityDropout::NONE,
    };
    let mut a = Trainer::new(&vanilla, vanilla.objective().unwrap(), &data, &interactions).unwrap();
    let mut b = Trainer::new(&multitask, reduced, &data, &interactions).unwrap();
    let batch_a = a.sampler.epoch().remove(0);
    let batch_b = b.sampler.epoch().remove(0);
    assert_eq!(batch_a, batch_b);
    let la = a.step(&batch_a).unwrap();
    let lb = b.step(&batch_b).unwrap();
    assert_eq!(la.total.to_bits(), lb.total.to_bits());
    for id in a.params.ids() {
        let (x, y) = (a.params.get(id).data(), b.params.get(id).data());
        assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()), "{} differs", a.params.name(id));
    }
}

#[test]
fn engagement_step_updates_the_context_encoder() {
    let (_, ds) = corpus(15, 600, 300, 4000, 100);
    let tower = small_tower();
    let config = RunConfig {
        arm: Arm::Multitask,
        batch_size: 16,
        engagement_batch: 16,
        tower: tower.clone(),
        ..RunConfig::default()
    };
    let data = PreparedData::new(&ds, &tower).unwrap();
    let interactions = ds.training_interactions(config.eval_day);
    let mut trainer = Trainer::new(&config, config.objective().unwrap(), &data, &interactions).unwrap();
    let before = trainer.params.clone();
    let batch = trainer.sampler.epoch().remove(0);
    let rec = trainer.step(&batch).unwrap();
    assert!(rec.engagement.is_some_and(f64::is_finite));
    assert!(changed(&before, &trainer.params, "doc.context.mlp"));
    assert!(changed(&before, &trainer.params, "doc.context.norm"));
}

#[test]
fn every_arm_reduces_its_loss_within_an_epoch() {
    let (_, ds) = corpus(16, 2000, 800, 22_000, 100);
    for arm in Arm::ALL {
        let config = RunConfig { arm, batch_size: 32, engagement_batch: 32, epochs: 1, ..RunConfig::default() };
        let data = PreparedData::new(&ds, &config.effective_tower().unwrap()).unwrap();
        let out = train(&config, &ds, &data, |_, _, _| Ok(())).unwrap();
        assert!(out.log.len() >= 200, "{arm}: only {} steps", out.log.len());
        let totals: Vec<f64> = out.log.iter().map(|r| r.total).collect();
        let first = median(&totals[..100]);
        let last = median(&totals[totals.len() - 100..]);
        assert!(last < first, "{arm}: median loss {first} -> {last}");
    }
}

#[test]
fn same_seed_same_loss_log() {
    let (_, ds) = corpus(17, 600, 300, 4000, 100);
    let tower = small_tower();
    let config = RunConfig {
        arm: Arm::MultitaskDropout,
        batch_size: 16,
        engagement_batch: 8,
        epochs: 2,
        tower: tower.clone(),
        ..RunConfig::default()
    };
    let run = || {
        let data = PreparedData::new(&ds, &config.effective_tower().unwrap()).unwrap();
        train(&config, &ds, &data, |_, _, _| Ok(())).unwrap()
    };
    let (a, b) = (run(), run());
    assert!(!a.log.is_empty());
    assert_eq!(a.log, b.log);
    let other = {
        let c = RunConfig { seed: 2, ..config.clone() };
        let data = PreparedData::new(&ds, &c.effective_tower().unwrap()).unwrap();
        train(&c, &ds, &data, |_, _, _| Ok(())).unwrap()
    };
    assert_ne!(a.log, other.log);
}
