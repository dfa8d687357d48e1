// Finite-difference cases shared by the gradient tests and the acceptance run.
#![allow(dead_code)]

use ebr_core::autodiff::{gradient_check, GradCheckConfig, GradCheckReport, Graph, ParamSet, Var};
use ebr_core::losses::{self, LossWeights};
use ebr_core::nn::{Mode, TransformerBlock};
use ebr_core::towers::{DocumentInput, ModalityDropout, QueryInput, TowerConfig, TwoTowerModel};
use ebr_core::{Result, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

pub type Build = Box<dyn Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    pub params: ParamSet<f64>,
    pub build: Build,
}

impl Case {
    pub fn check(mut self) -> Result<GradCheckReport> {
        gradient_check(&mut self.params, &self.build, GradCheckConfig::default())
    }
}

fn normal(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

/// `sum(out * w)` with a fixed random `w`, so every output coordinate matters.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ebr_core::rng::stream(seed, "projection");
    let w = g.constant(normal(g.shape(out), &mut rng));
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn case(name: &'static str, shapes: &[(&str, &[usize])], build: Build) -> Case {
    let mut rng = ebr_core::rng::stream(name.len() as u64, name);
    let mut params = ParamSet::new();
    for (n, s) in shapes {
        params.add(n, normal(s, &mut rng)).unwrap();
    }
    Case { name, params, build }
}

fn p(g: &mut Graph<f64>, params: &ParamSet<f64>, name: &str) -> Var {
    g.param(params, params.id(name).unwrap())
}

pub fn op_cases() -> Vec<Case> {
    vec![
        case(
            "matmul",
            &[("a", &[3, 4]), ("b", &[4, 2])],
            Box::new(|g, ps| {
                let (a, b) = (p(g, ps, "a"), p(g, ps, "b"));
                let y = g.matmul(a, b)?;
                project(g, y, 1)
            }),
        ),
        case(
            "transpose",
            &[("a", &[3, 2])],
            Box::new(|g, ps| {
                let a = p(g, ps, "a");
                let y = g.transpose(a)?;
                project(g, y, 2)
            }),
        ),
        case(
            "add_bias",
            &[("x", &[3, 4]), ("b", &[4])],
            Box::new(|g, ps| {
                let (x, b) = (p(g, ps, "x"), p(g, ps, "b"));
                let y = g.add_bias(x, b)?;
                project(g, y, 3)
            }),
        ),
        case(
            "add_sub_mul",
            &[("a", &[2, 3]), ("b", &[2, 3])],
            Box::new(|g, ps| {
                let (a, b) = (p(g, ps, "a"), p(g, ps, "b"));
                let s = g.add(a, b)?;
                let d = g.sub(a, b)?;
                let y = g.mul(s, d)?;
                let y = g.scale(y, 0.7);
                project(g, y, 4)
            }),
        ),
        case(
            "gelu",
            &[("x", &[4, 5])],
            Box::new(|g, ps| {
                let x = p(g, ps, "x");
                let y = g.gelu(x);
                project(g, y, 5)
            }),
        ),
        case(
            "embedding_bag",
            &[("table", &[10, 4])],
            Box::new(|g, ps| {
                let t = p(g, ps, "table");
                let y = g.embedding_bag(t, &[vec![0], vec![1, 2, 3], vec![], vec![3, 3, 9]])?;
                project(g, y, 6)
            }),
        ),
        case(
            "gather_rows",
            &[("table", &[6, 3])],
            Box::new(|g, ps| {
                let t = p(g, ps, "table");
                let y = g.gather_rows(t, &[5, 0, 5, 2])?;
                project(g, y, 7)
            }),
        ),
        case(
            "route_rows",
            &[("a", &[3, 2]), ("b", &[1, 2])],
            Box::new(|g, ps| {
                let (a, b) = (p(g, ps, "a"), p(g, ps, "b"));
                let y = g.route_rows(&[a, b], &[Some((0, 2)), None, Some((1, 0)), Some((0, 0)), Some((1, 0))], 2)?;
                project(g, y, 8)
            }),
        ),
        case(
            "concat_cols",
            &[("a", &[3, 2]), ("b", &[3, 1])],
            Box::new(|g, ps| {
                let (a, b) = (p(g, ps, "a"), p(g, ps, "b"));
                let y = g.concat_cols(&[a, b, a])?;
                project(g, y, 9)
            }),
        ),
        case(
            "layer_norm",
            &[("x", &[3, 5]), ("gamma", &[5]), ("beta", &[5])],
            Box::new(|g, ps| {
                let (x, gm, bt) = (p(g, ps, "x"), p(g, ps, "gamma"), p(g, ps, "beta"));
                let y = g.layer_norm(x, gm, bt)?;
                project(g, y, 10)
            }),
        ),
        case(
            "batch_norm_train",
            &[("x", &[5, 3]), ("gamma", &[3]), ("beta", &[3])],
            Box::new(|g, ps| {
                let (x, gm, bt) = (p(g, ps, "x"), p(g, ps, "gamma"), p(g, ps, "beta"));
                let y = g.batch_norm_train(x, gm, bt)?;
                project(g, y, 11)
            }),
        ),
        case(
            "batch_norm_infer",
            &[("x", &[4, 3]), ("gamma", &[3]), ("beta", &[3])],
            Box::new(|g, ps| {
                let (x, gm, bt) = (p(g, ps, "x"), p(g, ps, "gamma"), p(g, ps, "beta"));
                let y = g.batch_norm_infer(x, gm, bt, &[0.2, -0.1, 1.0], &[1.5, 0.3, 2.0])?;
                project(g, y, 12)
            }),
        ),
        case(
            "attention",
            &[("q", &[6, 4]), ("k", &[6, 4]), ("v", &[6, 4])],
            Box::new(|g, ps| {
                let (q, k, v) = (p(g, ps, "q"), p(g, ps, "k"), p(g, ps, "v"));
                let valid = [true, true, false, true, true, true];
                let y = g.attention(q, k, v, 2, 3, 2, &valid)?;
                project(g, y, 13)
            }),
        ),
        case(
            "row_softmax",
            &[("x", &[3, 4])],
            Box::new(|g, ps| {
                let x = p(g, ps, "x");
                let y = g.row_softmax(x)?;
                project(g, y, 14)
            }),
        ),
        case(
            "l2_normalize_rows",
            &[("x", &[3, 4])],
            Box::new(|g, ps| {
                let x = p(g, ps, "x");
                let y = g.l2_normalize_rows(x);
                project(g, y, 15)
            }),
        ),
        case(
            "row_dot",
            &[("a", &[3, 4]), ("b", &[3, 4])],
            Box::new(|g, ps| {
                let (a, b) = (p(g, ps, "a"), p(g, ps, "b"));
                let y = g.row_dot(a, b)?;
                project(g, y, 16)
            }),
        ),
        case(
            "softmax_cross_entropy",
            &[("x", &[3, 4])],
            Box::new(|g, ps| {
                let x = p(g, ps, "x");
                g.softmax_cross_entropy(x, &[0, 3, 1])
            }),
        ),
        case(
            "sigmoid_bce",
            &[("x", &[5])],
            Box::new(|g, ps| {
                let x = p(g, ps, "x");
                g.sigmoid_bce(x, &[1.0, 0.0, 0.0, 1.0, 1.0], 1e-7)
            }),
        ),
        case(
            "mean_reshape",
            &[("x", &[2, 6])],
            Box::new(|g, ps| {
                let x = p(g, ps, "x");
                let r = g.reshape(x, &[3, 4])?;
                let t = g.transpose(r)?;
                let y = g.mul(t, t)?;
                Ok(g.mean(y))
            }),
        ),
        case(
            "relevance_loss",
            &[("q", &[4, 5]), ("d", &[4, 5])],
            Box::new(|g, ps| {
                let (q, d) = (p(g, ps, "q"), p(g, ps, "d"));
                let (q, d) = (g.l2_normalize_rows(q), g.l2_normalize_rows(d));
                let sim = losses::similarity_matrix(g, q, d)?;
                // a smaller scale keeps the softmax away from saturation
                losses::relevance_loss(g, sim, 3.0)
            }),
        ),
        case(
            "mixed_batch_loss",
            &[("q", &[3, 4]), ("d", &[3, 4]), ("r", &[2, 4])],
            Box::new(|g, ps| {
                let (q, d, r) = (p(g, ps, "q"), p(g, ps, "d"), p(g, ps, "r"));
                let (q, d, r) = (g.l2_normalize_rows(q), g.l2_normalize_rows(d), g.l2_normalize_rows(r));
                let sim = losses::similarity_matrix(g, q, d)?;
                let rs = losses::similarity_matrix(g, q, r)?;
                losses::mixed_batch_loss(g, sim, Some(rs), 3.0)
            }),
        ),
        case(
            "multitask_loss",
            &[("q", &[4, 3]), ("d", &[4, 3])],
            Box::new(|g, ps| {
                let (q, d) = (p(g, ps, "q"), p(g, ps, "d"));
                let (q, d) = (g.l2_normalize_rows(q), g.l2_normalize_rows(d));
                let sim = losses::similarity_matrix(g, q, d)?;
                let rel = losses::relevance_loss(g, sim, 2.0)?;
                let kappa = g.row_dot(q, d)?;
                let eng = losses::engagement_loss(g, kappa, &[1.0, 0.0, 1.0, 0.0], 2.0)?;
                losses::multitask_loss(g, rel, eng, LossWeights::default())
            }),
        ),
        {
            let mut c = case("transformer_block", &[], Box::new(|_, _| unreachable!()));
            let mut rng = ebr_core::rng::stream(3, "block");
            let block = TransformerBlock::new(&mut c.params, "blk", 8, 8, 2, &mut rng).unwrap();
            c.params.add("x", normal(&[1, 3, 8], &mut rng)).unwrap();
            c.build = Box::new(move |g, ps| {
                let x = p(g, ps, "x");
                let y = block.forward(g, ps, x, &[false, false, false])?;
                project(g, y, 17)
            });
            c
        },
    ]
}

/// Documents and queries for the tiny tower config.
pub fn tiny_inputs(config: &TowerConfig) -> (Vec<QueryInput>, Vec<DocumentInput>) {
    let queries = ["red lamp", "oak table", "vintage camera lens"]
        .iter()
        .map(|q| QueryInput::from_text(q, config).unwrap())
        .collect();
    let docs = vec![
        DocumentInput::from_text(
            "red lamp",
            "brass base",
            vec![vec![0.1, -0.4, 0.9]],
            vec![25.0, 3.0, 4.5],
            vec![0, 1],
            config,
        ),
        DocumentInput::from_text(
            "oak",
            "solid oak dining table seats six",
            vec![],
            vec![300.0, 40.0, 3.9],
            vec![1, 0],
            config,
        ),
        DocumentInput::from_text(
            "camera lens",
            "fits most bodies",
            vec![vec![0.3, 0.3, -0.2], vec![-1.0, 0.5, 0.0]],
            vec![80.0, 0.0, 5.0],
            vec![2, 3],
            config,
        ),
    ];
    (queries, docs)
}

fn tiny_model() -> (TowerConfig, TwoTowerModel, ParamSet<f64>) {
    let mut config = TowerConfig::tiny();
    config.dropout = ModalityDropout::NONE;
    let mut params = ParamSet::new();
    let mut rng = ebr_core::rng::stream(11, "tiny-towers");
    let model = TwoTowerModel::new(config.clone(), &mut params, &mut rng).unwrap();
    (config, model, params)
}

pub fn tower_cases() -> Vec<Case> {
    let (config, model, params) = tiny_model();
    let (queries, docs) = tiny_inputs(&config);
    let m = model.clone();
    let qs = queries.clone();
    let query = Case {
        name: "query_tower",
        params: params.clone(),
        build: Box::new(move |g, ps| {
            let refs: Vec<&QueryInput> = qs.iter().collect();
            let y = m.encode_queries(g, ps, &refs)?;
            project(g, y, 21)
        }),
    };
    let m = model.clone();
    let ds = docs.clone();
    let document = Case {
        name: "document_tower",
        params: params.clone(),
        build: Box::new(move |g, ps| {
            let refs: Vec<&DocumentInput> = ds.iter().collect();
            let mut rng = ebr_core::rng::stream(0, "unused");
            let enc = m.encode_documents(g, ps, &refs, Mode::Train, &mut rng)?;
            project(g, enc.embeddings, 22)
        }),
    };
    let both = Case {
        name: "two_tower_multitask_loss",
        params,
        build: Box::new(move |g, ps| {
            let qr: Vec<&QueryInput> = queries.iter().collect();
            let dr: Vec<&DocumentInput> = docs.iter().collect();
            let mut rng = ebr_core::rng::stream(0, "unused");
            let q = model.encode_queries(g, ps, &qr)?;
            let enc = model.encode_documents(g, ps, &dr, Mode::Train, &mut rng)?;
            let sim = losses::similarity_matrix(g, q, enc.embeddings)?;
            let rel = losses::relevance_loss(g, sim, 4.0)?;
            let kappa = g.row_dot(q, enc.embeddings)?;
            let eng = losses::engagement_loss(g, kappa, &[1.0, 0.0, 1.0], 4.0)?;
            losses::multitask_loss(g, rel, eng, LossWeights::default())
        }),
    };
    vec![query, document, both]
}
