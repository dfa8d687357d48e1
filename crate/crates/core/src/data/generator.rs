use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, InteractionRecord, ProductDocument, QueryRecord, CONDITIONS, MAX_IMAGES};
use crate::eval::LabeledPair;
use crate::rng::{stream, ChaCha8Rng};
use crate::{Error, Result};

/// Logistic engagement model over a displayed impression.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngagementModel {
    pub topic: f64,
    pub price: f64,
    pub condition: f64,
    pub rating: f64,
    pub bias: f64,
}

impl Default for EngagementModel {
    fn default() -> Self {
        Self { topic: 3.0, price: 2.0, condition: 4.0, rating: 4.0, bias: -6.0 }
    }
}

impl EngagementModel {
    pub fn logit(&self, topic_sim: f64, price_reasonableness: f64, condition_score: f64, rating_score: f64) -> f64 {
        self.topic * topic_sim
            + self.price * price_reasonableness
            + self.condition * condition_score
            + self.rating * rating_score
            + self.bias
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub categories: usize,
    pub topic_dim: usize,
    pub image_vec_dim: usize,
    pub words_per_category: usize,
    pub generic_words: usize,
    /// Per-coordinate std of item/query topics around their category centre.
    pub topic_noise: f64,
    /// Per-coordinate std of word topics around their category centre.
    pub word_topic_noise: f64,
    /// Sharpness of topic-conditioned word choice.
    pub word_sharpness: f64,
    pub title_words: (usize, usize),
    pub description_words: (usize, usize),
    pub query_words: (usize, usize),
    /// Fraction of description words drawn from the category pool.
    pub description_topical: f64,
    /// Range of category log-median prices.
    pub log_price_range: (f64, f64),
    pub price_sigma: f64,
    pub image_noise: f64,
    pub mean_age_days: f64,
    /// Sharpness of the relevance-driven display softmax.
    pub display_sharpness: f64,
    pub engagement: EngagementModel,
    pub days: u32,
    pub eval_day: u32,
    pub relevance_threshold: f64,
    pub relevance_pairs: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            categories: 12,
            topic_dim: 8,
            image_vec_dim: 16,
            words_per_category: 40,
            generic_words: 60,
            topic_noise: 0.18,
            word_topic_noise: 0.5,
            word_sharpness: 6.0,
            title_words: (3, 6),
            description_words: (10, 30),
            query_words: (1, 3),
            description_topical: 0.5,
            log_price_range: (libm::log(10.0), libm::log(1000.0)),
            price_sigma: 0.5,
            image_noise: 0.3,
            mean_age_days: 30.0,
            display_sharpness: 5.0,
            engagement: EngagementModel::default(),
            days: 10,
            eval_day: 9,
            relevance_threshold: 0.8,
            relevance_pairs: 20_000,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("generator: {m}")));
        if self.categories == 0 || self.topic_dim == 0 || self.image_vec_dim == 0 {
            return bad("categories, topic_dim and image_vec_dim must be positive");
        }
        if self.words_per_category == 0 {
            return bad("words_per_category must be positive");
        }
        for (name, (lo, hi)) in [
            ("title_words", self.title_words),
            ("description_words", self.description_words),
            ("query_words", self.query_words),
        ] {
            if lo > hi || (name != "description_words" && lo == 0) {
                return bad(&format!("invalid {name} range ({lo}, {hi})"));
            }
        }
        if !(self.price_sigma >= 0.0 && self.log_price_range.0 <= self.log_price_range.1) {
            return bad("invalid price distribution");
        }
        if self.days == 0 || self.eval_day >= self.days {
            return bad("eval_day must be one of the generated days");
        }
        if !(0.0..=1.0).contains(&self.description_topical) {
            return bad("description_topical outside [0, 1]");
        }
        Ok(())
    }
}

/// Hidden per-category generator state.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryProfile {
    pub center: Vec<f64>,
    pub price_median: f64,
    pub words: Vec<String>,
    pub word_topics: Vec<Vec<f64>>,
}

/// Output of [`generate_catalog`]: products, queries and the hidden state
/// needed to generate interactions and relevance labels.
#[derive(Clone, Debug)]
pub struct Catalog {
    pub config: GeneratorConfig,
    pub categories: Vec<CategoryProfile>,
    pub generic_words: Vec<String>,
    pub products: Vec<ProductDocument>,
    pub queries: Vec<QueryRecord>,
}

fn unit_gaussian<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    normalize(&mut v);
    v
}

fn normalize(v: &mut [f64]) {
    let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>()).max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
}

fn perturb<R: Rng + ?Sized>(center: &[f64], std: f64, rng: &mut R) -> Vec<f64> {
    let mut v: Vec<f64> = center.iter().map(|&c| c + std * rng.sample::<f64, _>(StandardNormal)).collect();
    normalize(&mut v);
    v
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "tr"];
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ay"];

fn pseudo_word<R: Rng + ?Sized>(rng: &mut R, taken: &mut BTreeSet<String>) -> String {
    loop {
        let syllables = rng.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
            w.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
        }
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

/// Index drawn from `p(i) ∝ exp(weights[i] - max)`.
fn sample_softmax<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = weights.iter().map(|w| libm::exp(w - max)).sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= libm::exp(w - max);
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

fn topical_words<R: Rng + ?Sized>(
    cat: &CategoryProfile,
    topic: &[f64],
    count: usize,
    sharpness: f64,
    rng: &mut R,
) -> Vec<String> {
    let weights: Vec<f64> = cat.word_topics.iter().map(|w| sharpness * dot(w, topic)).collect();
    (0..count).map(|_| cat.words[sample_softmax(&weights, rng)].clone()).collect()
}

fn round_to(x: f64, digits: i32) -> f64 {
    let s = libm::pow(10.0, digits as f64);
    libm::round(x * s) / s
}

/// Deterministic catalog of `n_products` products and `n_queries` queries.
pub fn generate_catalog(seed: u64, n_products: usize, n_queries: usize, config: &GeneratorConfig) -> Result<Catalog> {
    config.validate()?;
    if n_products == 0 || n_queries == 0 {
        return Err(Error::Config("catalog needs at least one product and one query".into()));
    }
    let mut rng = stream(seed, "catalog");
    let mut taken = BTreeSet::new();
    let categories: Vec<CategoryProfile> = (0..config.categories)
        .map(|_| {
            let center = unit_gaussian(config.topic_dim, &mut rng);
            let log_median = rng.random_range(config.log_price_range.0..=config.log_price_range.1);
            let words = (0..config.words_per_category).map(|_| pseudo_word(&mut rng, &mut taken)).collect();
            let word_topics =
                (0..config.words_per_category).map(|_| perturb(&center, config.word_topic_noise, &mut rng)).collect();
            CategoryProfile { center, price_median: round_to(libm::exp(log_median), 2), words, word_topics }
        })
        .collect();
    let generic_words: Vec<String> = (0..config.generic_words).map(|_| pseudo_word(&mut rng, &mut taken)).collect();
    // fixed topic -> image feature projection
    let projection: Vec<Vec<f64>> = (0..config.image_vec_dim)
        .map(|_| {
            (0..config.topic_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal) / libm::sqrt(config.topic_dim as f64))
                .collect()
        })
        .collect();
    let age = Exp::new(1.0 / config.mean_age_days.max(1e-9)).map_err(|e| Error::Config(format!("{e}")))?;

    let mut products = Vec::with_capacity(n_products);
    for id in 0..n_products {
        let category_id = rng.random_range(0..config.categories);
        let cat = &categories[category_id];
        let topic = perturb(&cat.center, config.topic_noise, &mut rng);
        let n_title = rng.random_range(config.title_words.0..=config.title_words.1);
        let title = topical_words(cat, &topic, n_title, config.word_sharpness, &mut rng).join(" ");
        let n_desc = rng.random_range(config.description_words.0..=config.description_words.1);
        let mut desc = Vec::with_capacity(n_desc);
        for _ in 0..n_desc {
            if rng.random::<f64>() < config.description_topical || generic_words.is_empty() {
                desc.extend(topical_words(cat, &topic, 1, config.word_sharpness, &mut rng));
            } else {
                desc.push(generic_words[rng.random_range(0..generic_words.len())].clone());
            }
        }
        let z: f64 = StandardNormal.sample(&mut rng);
        let price = round_to(cat.price_median * libm::exp(config.price_sigma * z), 2).max(0.01);
        let condition_id = match rng.random::<f64>() {
            u if u < 0.3 => 0,
            u if u < 0.6 => 1,
            u if u < 0.85 => 2,
            _ => 3,
        };
        let rating_z: f64 = StandardNormal.sample(&mut rng);
        let seller_rating = round_to((4.0 + 0.7 * rating_z).clamp(0.0, 5.0), 1);
        let age_days = round_to(age.sample(&mut rng), 1);
        let n_images = if rng.random::<f64>() < 0.1 { 0 } else { rng.random_range(1..=MAX_IMAGES) };
        let image_vectors = (0..n_images)
            .map(|_| {
                projection
                    .iter()
                    .map(|row| (dot(row, &topic) + config.image_noise * rng.sample::<f64, _>(StandardNormal)) as f32)
                    .collect()
            })
            .collect();
        products.push(ProductDocument {
            id: id as u64,
            title,
            description: desc.join(" "),
            category_id,
            condition_id,
            price,
            age_days,
            seller_rating,
            image_vectors,
            latent_topic: Some(topic),
        });
    }

    let mut queries = Vec::with_capacity(n_queries);
    for id in 0..n_queries {
        let cat = &categories[rng.random_range(0..config.categories)];
        let topic = perturb(&cat.center, config.topic_noise, &mut rng);
        let n = rng.random_range(config.query_words.0..=config.query_words.1);
        let text = topical_words(cat, &topic, n, config.word_sharpness, &mut rng).join(" ");
        queries.push(QueryRecord { id: id as u64, text, latent_topic: Some(topic) });
    }
    debug_assert!(CONDITIONS == 4);
    Ok(Catalog { config: config.clone(), categories, generic_words, products, queries })
}

impl Catalog {
    pub fn product_topic(&self, i: usize) -> &[f64] {
        self.products[i].latent_topic.as_deref().expect("generated product")
    }

    pub fn query_topic(&self, i: usize) -> &[f64] {
        self.queries[i].latent_topic.as_deref().expect("generated query")
    }

    /// Hidden topic similarity of a (query index, product index) pair.
    pub fn topic_similarity(&self, query: usize, product: usize) -> f64 {
        dot(self.query_topic(query), self.product_topic(product))
    }

    /// `-|ln(price / category median)|`.
    pub fn price_reasonableness(&self, product: usize) -> f64 {
        let p = &self.products[product];
        -libm::fabs(libm::log(p.price / self.categories[p.category_id].price_median))
    }

    /// Engagement probability of a displayed pair.
    pub fn engagement_probability(&self, query: usize, product: usize) -> f64 {
        let p = &self.products[product];
        let logit = self.config.engagement.logit(
            self.topic_similarity(query, product),
            self.price_reasonableness(product),
            1.0 - p.condition_id as f64 / 3.0,
            (p.seller_rating - 2.5) / 2.5,
        );
        1.0 / (1.0 + libm::exp(-logit))
    }

    /// Relevance ground truth: topic similarity above the configured threshold.
    pub fn is_relevant(&self, query: usize, product: usize) -> bool {
        self.topic_similarity(query, product) > self.config.relevance_threshold
    }

    /// Products, queries and relevance pairs as a [`Dataset`] without interactions.
    pub fn into_dataset(self, interactions: Vec<InteractionRecord>, relevance: Vec<LabeledPair>) -> Dataset {
        Dataset { products: self.products, queries: self.queries, interactions, relevance }
    }
}

/// For each entry of `queries`, a product drawn from the relevance-driven
/// display distribution `softmax(sharpness * topic_sim)`. Queries are visited
/// in index order so each distribution is built once.
fn sample_displayed(catalog: &Catalog, queries: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut by_query: Vec<Vec<usize>> = vec![Vec::new(); catalog.queries.len()];
    for (slot, &q) in queries.iter().enumerate() {
        by_query[q].push(slot);
    }
    let mut out = vec![0usize; queries.len()];
    let mut cdf = vec![0.0f64; catalog.products.len()];
    let sharpness = catalog.config.display_sharpness;
    for (q, slots) in by_query.iter().enumerate() {
        if slots.is_empty() {
            continue;
        }
        let mut acc = 0.0;
        for (p, c) in cdf.iter_mut().enumerate() {
            // sims are in [-1, 1]; shifting by the max possible logit keeps exp bounded
            acc += libm::exp(sharpness * (catalog.topic_similarity(q, p) - 1.0));
            *c = acc;
        }
        for &slot in slots {
            let u = rng.random::<f64>() * acc;
            out[slot] = cdf.partition_point(|&c| c < u).min(cdf.len() - 1);
        }
    }
    out
}

/// `n_impressions` displayed impressions with Bernoulli engagement labels,
/// spread over `config.days` consecutive days in stream order.
pub fn generate_interactions(seed: u64, catalog: &Catalog, n_impressions: usize) -> Result<Vec<InteractionRecord>> {
    if catalog.products.is_empty() || catalog.queries.is_empty() {
        return Err(Error::Data("cannot generate interactions for an empty catalog".into()));
    }
    let mut qrng = stream(seed, "impression-queries");
    let mut drng = stream(seed, "impression-display");
    let mut erng = stream(seed, "impression-engagement");
    let queries: Vec<usize> = (0..n_impressions).map(|_| qrng.random_range(0..catalog.queries.len())).collect();
    let products = sample_displayed(catalog, &queries, &mut drng);
    let days = catalog.config.days as u64;
    Ok(queries
        .iter()
        .zip(&products)
        .enumerate()
        .map(|(i, (&q, &p))| {
            let engaged = erng.random::<f64>() < catalog.engagement_probability(q, p);
            InteractionRecord {
                query_id: catalog.queries[q].id,
                product_id: catalog.products[p].id,
                displayed: true,
                engaged,
                day: ((i as u64 * days) / n_impressions.max(1) as u64) as u32,
            }
        })
        .collect())
}

/// Relevance-labelled pairs: half drawn from the display distribution (hard,
/// mostly on-topic), half uniformly from the catalog (easy). Labels come from
/// topic similarity only; contextual features play no part.
pub fn generate_relevance_set(seed: u64, catalog: &Catalog, n_pairs: usize) -> Result<Vec<LabeledPair>> {
    if catalog.products.is_empty() || catalog.queries.is_empty() {
        return Err(Error::Data("cannot label pairs for an empty catalog".into()));
    }
    let mut rng = stream(seed, "relevance");
    let queries: Vec<usize> = (0..n_pairs).map(|_| rng.random_range(0..catalog.queries.len())).collect();
    let hard: Vec<bool> = (0..n_pairs).map(|_| rng.random::<bool>()).collect();
    let mut drng = stream(seed, "relevance-display");
    let displayed = sample_displayed(catalog, &queries, &mut drng);
    Ok((0..n_pairs)
        .map(|i| {
            let p = if hard[i] { displayed[i] } else { rng.random_range(0..catalog.products.len()) };
            let q = queries[i];
            LabeledPair {
                query_id: catalog.queries[q].id,
                product_id: catalog.products[p].id,
                label: catalog.is_relevant(q, p) as u8,
            }
        })
        .collect())
}
