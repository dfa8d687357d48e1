//! Synthetic marketplace corpus, dataset validation and training-batch sampling.
//!
//! Products and queries carry a hidden topic vector. Products are displayed
//! for a query with probability rising with topic similarity; whether a
//! displayed product is engaged additionally depends on its price relative
//! to the category median, its condition and the seller rating. Relevance
//! and engagement are therefore related but distinct labels.

mod batch;
mod generator;

pub use batch::{BatchSampler, TrainingBatch};
pub use generator::{
    generate_catalog, generate_interactions, generate_relevance_set, Catalog, CategoryProfile, EngagementModel,
    GeneratorConfig,
};

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::eval::LabeledPair;
use crate::towers::{DocumentInput, QueryInput, TowerConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductDocument {
    pub id: u64,
    pub title: String,
    pub description: String,
    pub category_id: usize,
    pub condition_id: usize,
    pub price: f64,
    pub age_days: f64,
    pub seller_rating: f64,
    #[serde(default)]
    pub image_vectors: Vec<Vec<f32>>,
    /// Generator state, never serialized or shown to the model.
    #[serde(skip)]
    pub latent_topic: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: u64,
    pub text: String,
    #[serde(skip)]
    pub latent_topic: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub query_id: u64,
    pub product_id: u64,
    pub displayed: bool,
    pub engaged: bool,
    #[serde(default)]
    pub day: u32,
}

pub const CONDITIONS: usize = 4;
pub const MAX_IMAGES: usize = 3;

impl ProductDocument {
    pub fn validate(&self, categories: usize, image_dim: usize) -> Result<()> {
        let fail = |what: &str| Err(Error::Data(format!("product {}: {what}", self.id)));
        if !(self.price.is_finite() && self.price > 0.0) {
            return fail("price must be positive");
        }
        if !(self.age_days.is_finite() && self.age_days >= 0.0) {
            return fail("age_days must be non-negative");
        }
        if !(0.0..=5.0).contains(&self.seller_rating) {
            return fail("seller_rating outside [0, 5]");
        }
        if self.category_id >= categories {
            return fail("category_id out of range");
        }
        if self.condition_id >= CONDITIONS {
            return fail("condition_id out of range");
        }
        if self.image_vectors.len() > MAX_IMAGES {
            return fail("more than 3 images");
        }
        if self.image_vectors.iter().any(|v| v.len() != image_dim || v.iter().any(|x| !x.is_finite())) {
            return fail("image vector has wrong dimension or non-finite values");
        }
        Ok(())
    }

    pub fn to_input(&self, config: &TowerConfig) -> DocumentInput {
        DocumentInput::from_text(
            &self.title,
            &self.description,
            self.image_vectors.clone(),
            alloc::vec![self.price, self.age_days, self.seller_rating],
            alloc::vec![self.category_id, self.condition_id],
            config,
        )
    }
}

impl InteractionRecord {
    pub fn validate(&self) -> Result<()> {
        if self.engaged && !self.displayed {
            return Err(Error::Data(format!(
                "interaction ({}, {}): engaged but not displayed",
                self.query_id, self.product_id
            )));
        }
        Ok(())
    }
}

/// Products, queries and interactions with cross-references checked.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub products: Vec<ProductDocument>,
    pub queries: Vec<QueryRecord>,
    pub interactions: Vec<InteractionRecord>,
    /// Generator-labelled relevance pairs (may be empty).
    pub relevance: Vec<LabeledPair>,
}

impl Dataset {
    pub fn validate(&self, categories: usize, image_dim: usize) -> Result<()> {
        let mut pids = alloc::collections::BTreeSet::new();
        for p in &self.products {
            p.validate(categories, image_dim)?;
            if !pids.insert(p.id) {
                return Err(Error::Data(format!("duplicate product id {}", p.id)));
            }
        }
        let mut qids = alloc::collections::BTreeSet::new();
        for q in &self.queries {
            if crate::text::normalize(&q.text).is_empty() {
                return Err(Error::Data(format!("query {}: empty text", q.id)));
            }
            if !qids.insert(q.id) {
                return Err(Error::Data(format!("duplicate query id {}", q.id)));
            }
        }
        let known = |q: u64, p: u64| -> Result<()> {
            if !qids.contains(&q) {
                return Err(Error::Data(format!("unknown query id {q}")));
            }
            if !pids.contains(&p) {
                return Err(Error::Data(format!("unknown product id {p}")));
            }
            Ok(())
        };
        for i in &self.interactions {
            i.validate()?;
            known(i.query_id, i.product_id)?;
        }
        for r in &self.relevance {
            if r.label > 1 {
                return Err(Error::Label(format!(
                    "relevance pair ({}, {}) label {}",
                    r.query_id, r.product_id, r.label
                )));
            }
            known(r.query_id, r.product_id)?;
        }
        Ok(())
    }

    pub fn query_inputs(&self, config: &TowerConfig) -> Result<BTreeMap<u64, QueryInput>> {
        self.queries.iter().map(|q| Ok((q.id, QueryInput::from_text(&q.text, config)?))).collect()
    }

    pub fn document_inputs(&self, config: &TowerConfig) -> BTreeMap<u64, DocumentInput> {
        self.products.iter().map(|p| (p.id, p.to_input(config))).collect()
    }

    /// Impressions of one day as engagement-labelled pairs.
    pub fn engagement_pairs(&self, day: u32) -> Vec<LabeledPair> {
        self.interactions
            .iter()
            .filter(|i| i.displayed && i.day == day)
            .map(|i| LabeledPair { query_id: i.query_id, product_id: i.product_id, label: i.engaged as u8 })
            .collect()
    }

    /// Interactions strictly before the held-out day.
    pub fn training_interactions(&self, eval_day: u32) -> Vec<InteractionRecord> {
        self.interactions.iter().filter(|i| i.day < eval_day).copied().collect()
    }
}
