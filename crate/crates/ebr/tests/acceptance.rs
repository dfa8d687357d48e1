//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails. Criterion 4 trains 4 arms x 3 seeds x 3
//! epochs on the full synthetic corpus; set Q2E_THREADS to spread the runs.

#[path = "../../core/tests/common/gradcases.rs"]
mod gradcases;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ebr::{checkpoint, index_file, table1};
use ebr_core::autodiff::Graph;
use ebr_core::data::{generate_catalog, generate_interactions, generate_relevance_set, Dataset, GeneratorConfig};
use ebr_core::eval::{evaluate_multitask, roc_auc_scores, LabeledPair, ModelScorer};
use ebr_core::index::{dot, recall_at_k, IndexMode, RetrievalIndex};
use ebr_core::losses::{engagement_loss, mixed_batch_loss, relevance_loss};
use ebr_core::training::{self, Arm, PreparedData, RunConfig, Trainer};
use ebr_core::Tensor;

// Writes straight to stderr so the lines show up without --nocapture.
macro_rules! report {
    ($($arg:tt)*) => {
        let _ = writeln!(std::io::stderr(), $($arg)*);
    };
}
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// The corpus `ebr gen-data` writes with its default sizes.
fn default_corpus(seed: u64) -> Dataset {
    let cfg = GeneratorConfig::default();
    let cat = generate_catalog(seed, 5000, 2000, &cfg).unwrap();
    let inter = generate_interactions(seed, &cat, 50_000).unwrap();
    let rel = generate_relevance_set(seed, &cat, 20_000).unwrap();
    cat.into_dataset(inter, rel)
}

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let mut worst = (0.0f64, "");
    let mut cases = 0;
    for case in gradcases::op_cases().into_iter().chain(gradcases::tower_cases()) {
        let name = case.name;
        let err = case.check().map(|r| r.max_rel_error()).unwrap_or(f64::INFINITY);
        cases += 1;
        if err > worst.0 || err.is_nan() {
            worst = (err, name);
        }
    }
    let elapsed = started.elapsed();
    outcome(
        worst.0 < 1e-4 && elapsed < Duration::from_secs(120),
        format!("{cases} cases, worst rel error {:.2e} ({}), {:.1?}", worst.0, worst.1, elapsed),
    )
}

fn loss_oracles() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    for b in [2usize, 8, 64] {
        let mut g = Graph::<f64>::new();
        let sim = g.constant(Tensor::new(&[b, b], vec![0.3; b * b]).unwrap());
        let l = relevance_loss(&mut g, sim, 20.0).unwrap();
        let err = (g.value(l).item() - (b as f64).ln()).abs();
        pass &= err < 1e-6;
        notes.push(format!("uniform B={b} err {err:.1e}"));
    }
    let mut g = Graph::<f64>::new();
    let sim = g.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let l = relevance_loss(&mut g, sim, 20.0).unwrap();
    let err = (g.value(l).item() - (-20.0f64).exp().ln_1p()).abs();
    pass &= err < 1e-12;
    notes.push(format!("identity err {err:.1e}"));

    let mut g = Graph::<f64>::new();
    let kappa = g.constant(Tensor::new(&[4], vec![0.0; 4]).unwrap());
    let l = engagement_loss(&mut g, kappa, &[1.0, 0.0, 1.0, 0.0], 20.0).unwrap();
    let err = (g.value(l).item() - std::f64::consts::LN_2).abs();
    pass &= err < 1e-6;
    notes.push(format!("bce(0) err {err:.1e}"));

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let values: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut g = Graph::<f64>::new();
    let sim = g.constant(Tensor::new(&[8, 8], values).unwrap());
    let plain = relevance_loss(&mut g, sim, 20.0).unwrap();
    let mixed = mixed_batch_loss(&mut g, sim, None, 20.0).unwrap();
    let same = g.value(plain).item().to_bits() == g.value(mixed).item().to_bits();
    pass &= same;
    notes.push(format!("mixed R=0 bitwise {same}"));
    outcome(pass, notes.join(", "))
}

fn exhaustive_auc(scored: &[(f64, bool)]) -> f64 {
    let (mut twice, mut p, mut n) = (0u64, 0u64, 0u64);
    for &(sp, lp) in scored {
        if !lp {
            n += 1;
            continue;
        }
        p += 1;
        for &(sn, ln) in scored {
            if !ln {
                twice += if sp > sn {
                    2
                } else if sp == sn {
                    1
                } else {
                    0
                };
            }
        }
    }
    twice as f64 / (2 * p * n) as f64
}

fn auc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    let mut done = 0;
    while done < 1000 {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(1..=20);
        let scored: Vec<(f64, bool)> =
            (0..n).map(|_| (rng.random_range(0..levels) as f64 / 7.0, rng.random_bool(0.4))).collect();
        if scored.iter().all(|s| s.1) || scored.iter().all(|s| !s.1) {
            continue;
        }
        done += 1;
        if roc_auc_scores(&scored).unwrap() != exhaustive_auc(&scored) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{done} instances, {mismatches} mismatches"))
}

fn table1_ordering(dataset: &Dataset) -> Outcome {
    let started = Instant::now();
    let workers = table1::threads();
    let table = match table1::run(&RunConfig::default(), dataset, &Arm::ALL, &table1::SEEDS, workers) {
        Ok(t) => t,
        Err(e) => return outcome(false, format!("table1 failed: {e}")),
    };
    for row in &table.rows {
        report!(
            "    {:<18} engagement {:.4} relevance {:.4}  per seed eng {:?} rel {:?}",
            row.arm.name(),
            row.engagement_auc,
            row.relevance_auc,
            row.engagement_per_seed,
            row.relevance_per_seed
        );
    }
    let get = |arm| table.row(arm).unwrap();
    let (v, m, t, d) = (get(Arm::Vanilla), get(Arm::MixedBatch), get(Arm::Multitask), get(Arm::MultitaskDropout));
    let a1 = t.engagement_auc >= m.engagement_auc + 0.02;
    let a2 = m.engagement_auc >= v.engagement_auc + 0.02;
    let b = (t.relevance_auc - v.relevance_auc).abs() <= 0.05;
    let c = d.relevance_auc >= t.relevance_auc - 0.005;
    outcome(
        a1 && a2 && b && c,
        format!(
            "(a) multitask-mixed {:+.4} mixed-vanilla {:+.4}, (b) |rel multitask-vanilla| {:.4}, (c) rel dropout-multitask {:+.4}, {:.0?} on {workers} worker(s)",
            t.engagement_auc - m.engagement_auc,
            m.engagement_auc - v.engagement_auc,
            (t.relevance_auc - v.relevance_auc).abs(),
            d.relevance_auc - t.relevance_auc,
            started.elapsed()
        ),
    )
}

fn chance_level(dataset: &Dataset) -> Outcome {
    let config = RunConfig::default();
    let data = PreparedData::new(dataset, &config.tower).unwrap();
    let interactions = dataset.training_interactions(config.eval_day);
    let trainer = Trainer::new(&config, config.objective().unwrap(), &data, &interactions).unwrap();
    let scorer = ModelScorer {
        model: &trainer.model,
        params: &trainer.params,
        queries: &data.queries,
        documents: &data.documents,
        chunk: 256,
    };
    // an untrained model has no held-out day; every impression is unseen
    let engagement: Vec<LabeledPair> = dataset
        .interactions
        .iter()
        .map(|i| LabeledPair { query_id: i.query_id, product_id: i.product_id, label: i.engaged as u8 })
        .collect();
    let auc = evaluate_multitask(&scorer, &dataset.relevance, &engagement).unwrap();
    let ok = |v: f64| (0.45..=0.55).contains(&v);
    outcome(
        ok(auc.relevance_auc) && ok(auc.engagement_auc) && auc.n_relevance >= 20_000 && auc.n_engagement >= 20_000,
        format!(
            "relevance {:.4} (n={}), engagement {:.4} (n={})",
            auc.relevance_auc, auc.n_relevance, auc.engagement_auc, auc.n_engagement
        ),
    )
}

fn unit(v: &mut [f32]) {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// Unit vectors scattered around `centers` random directions.
fn clustered(rng: &mut ChaCha8Rng, centers: &[Vec<f32>], n: usize, spread: f32) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| {
            let c = &centers[rng.random_range(0..centers.len())];
            let mut v: Vec<f32> = c.iter().map(|&x| x + spread * rng.sample::<f32, _>(StandardNormal)).collect();
            unit(&mut v);
            v
        })
        .collect()
}

fn brute_force(ids: &[u64], rows: &[Vec<f32>], q: &[f32], k: usize) -> Vec<(u64, u32)> {
    let mut all: Vec<(u64, f32)> = ids.iter().zip(rows).map(|(&id, r)| (id, dot(q, r))).collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all.into_iter().take(k).map(|(id, s)| (id, s.to_bits())).collect()
}

fn ann_quality() -> Outcome {
    const D: usize = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let centers: Vec<Vec<f32>> = (0..200)
        .map(|_| {
            let mut c: Vec<f32> = (0..D).map(|_| rng.sample(StandardNormal)).collect();
            unit(&mut c);
            c
        })
        .collect();
    let spread = 1.0 / (D as f32).sqrt();
    let rows = clustered(&mut rng, &centers, 10_000, spread);
    let queries = clustered(&mut rng, &centers, 200, spread);
    let ids: Vec<u64> = (0..rows.len() as u64).map(|i| i * 3 + 1).collect();
    let flat: Vec<f32> = rows.iter().flatten().copied().collect();
    let exact = RetrievalIndex::build(ids.clone(), flat.clone(), D, IndexMode::Exact).unwrap();
    let ivf = RetrievalIndex::build(ids.clone(), flat.clone(), D, IndexMode::Ivf { clusters: 64, probes: 8 }).unwrap();

    let recall = recall_at_k(&ivf, &exact, &queries, 10).unwrap();
    let bitwise = queries.iter().all(|q| {
        let hits: Vec<(u64, u32)> = exact.search(q, 10).unwrap().iter().map(|h| (h.id, h.score.to_bits())).collect();
        hits == brute_force(&ids, &rows, q, 10)
    });
    let curve: Vec<f64> = [1, 2, 4, 8, 16, 32, 64]
        .iter()
        .map(|&p| recall_at_k(&ivf.with_probes(p).unwrap(), &exact, &queries, 10).unwrap())
        .collect();
    let monotone = curve.windows(2).all(|w| w[1] >= w[0]);

    // uniform directions have no cluster structure; reported for reference only
    let uniform: Vec<f32> = (0..10_000)
        .flat_map(|_| {
            let mut v: Vec<f32> = (0..D).map(|_| rng.sample(StandardNormal)).collect();
            unit(&mut v);
            v
        })
        .collect();
    let u_exact = RetrievalIndex::build(ids.clone(), uniform.clone(), D, IndexMode::Exact).unwrap();
    let u_ivf = RetrievalIndex::build(ids, uniform, D, IndexMode::Ivf { clusters: 64, probes: 8 }).unwrap();
    let u_recall = recall_at_k(&u_ivf, &u_exact, &queries, 10).unwrap();

    outcome(
        recall >= 0.95 && bitwise && monotone,
        format!(
            "clustered recall@10 {recall:.4} at 64/8, exact==brute force {bitwise}, probes 1..64 {:?} monotone {monotone}; uniform recall {u_recall:.4}",
            curve.iter().map(|r| (r * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    )
}

fn ebr_in(dir: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_ebr"))
        .current_dir(dir)
        .args(args)
        .env("Q2E_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let small = [
        "epochs=2",
        "batch_size=16",
        "engagement_batch=16",
        "tower.embedding_dim=16",
        "tower.hidden_dim=16",
        "tower.ff_dim=32",
        "tower.heads=2",
        "tower.fusion_layers=1",
        "tower.trigram_vocab=512",
        "tower.word_vocab=256",
        "data_dir=data",
    ];
    let mut trees = Vec::new();
    for _ in 0..2 {
        let root = tempfile::tempdir().unwrap();
        let dir = root.path();
        let mut ok = ebr_in(
            dir,
            &[
                "gen-data",
                "--seed",
                "21",
                "--out-dir",
                "data",
                "--products",
                "400",
                "--queries",
                "150",
                "--impressions",
                "4000",
            ],
        );
        let mut train = vec!["train", "--arm", "multitask_dropout", "--seed", "4", "--out", "model.q2e"];
        for kv in &small {
            train.extend(["--set", kv]);
        }
        ok &= ebr_in(dir, &train);
        ok &= ebr_in(dir, &["eval", "--checkpoint", "model.q2e", "--data", "data", "--out", "report.json"]);
        if !ok {
            return outcome(false, "a command failed".into());
        }
        trees.push(tree_bytes(dir));
    }
    let files: Vec<&str> = trees[0].iter().map(|(n, _)| n.as_str()).collect();
    outcome(trees[0] == trees[1], format!("{} artifacts compared: {}", files.len(), files.join(" ")))
}

fn round_trips() -> Outcome {
    let cfg = GeneratorConfig::default();
    let cat = generate_catalog(31, 300, 100, &cfg).unwrap();
    let inter = generate_interactions(31, &cat, 3000).unwrap();
    let rel = generate_relevance_set(31, &cat, 500).unwrap();
    let ds = cat.into_dataset(inter, rel);
    let mut config =
        RunConfig { arm: Arm::Multitask, epochs: 1, batch_size: 16, engagement_batch: 16, ..RunConfig::default() };
    config.tower.embedding_dim = 16;
    config.tower.hidden_dim = 16;
    config.tower.ff_dim = 32;
    config.tower.fusion_layers = 1;
    let data = PreparedData::new(&ds, &config.tower).unwrap();
    let out = training::train(&config, &ds, &data, |_, _, _| Ok(())).unwrap();
    let before = training::evaluate(&out.model, &out.params, &ds, &data, 9, 64).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.q2e");
    checkpoint::save(&path, &out.model.config, Some(&config), 1, &out.params).unwrap();
    let ckpt = checkpoint::load(&path).unwrap();
    let after = training::evaluate(&ckpt.model().unwrap(), &ckpt.params, &ds, &data, 9, 64).unwrap();
    let eval_same = before.relevance_auc.to_bits() == after.relevance_auc.to_bits()
        && before.engagement_auc.to_bits() == after.engagement_auc.to_bits();

    let docs: Vec<_> = data.documents.values().collect();
    let emb = out.model.embed_documents(&out.params, &docs, 64).unwrap();
    let ids: Vec<u64> = data.documents.keys().copied().collect();
    let flat: Vec<f32> = emb.iter().flatten().copied().collect();
    let queries: Vec<_> = data.queries.values().collect();
    let qs = out.model.embed_queries(&out.params, &queries, 64).unwrap();
    let mut search_same = true;
    for mode in [IndexMode::Exact, IndexMode::Ivf { clusters: 16, probes: 4 }] {
        let index = RetrievalIndex::build(ids.clone(), flat.clone(), 16, mode).unwrap();
        let p = dir.path().join("i.q2ei");
        index_file::save(&p, &index).unwrap();
        let loaded = index_file::load(&p).unwrap();
        for q in &qs {
            let a: Vec<_> = index.search(q, 10).unwrap().iter().map(|h| (h.id, h.score.to_bits())).collect();
            let b: Vec<_> = loaded.search(q, 10).unwrap().iter().map(|h| (h.id, h.score.to_bits())).collect();
            search_same &= a == b;
        }
    }
    outcome(
        eval_same && search_same,
        format!(
            "checkpoint eval identical {eval_same}, index search identical {search_same} ({} queries x 2 modes)",
            qs.len()
        ),
    )
}

#[test]
fn acceptance() {
    let dataset = default_corpus(7);
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("gradient suite", Box::new(gradient_suite)),
        ("loss oracles", Box::new(loss_oracles)),
        ("roc auc oracle", Box::new(auc_oracle)),
        ("table 1 ordering", Box::new(|| table1_ordering(&dataset))),
        ("chance level", Box::new(|| chance_level(&dataset))),
        ("ann quality", Box::new(ann_quality)),
        ("determinism", Box::new(determinism)),
        ("round trips", Box::new(round_trips)),
    ];
    // Q2E_ACCEPT=1,6 runs a subset
    let only: Option<Vec<usize>> =
        std::env::var("Q2E_ACCEPT").ok().map(|v| v.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        let o = check();
        report!("criterion {} {:<17} {}  {}", i + 1, name, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
