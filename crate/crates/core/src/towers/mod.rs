//! The two-tower model.
//!
//! Query tower: hashed character trigrams and word tokens, each mean-pooled
//! from an embedding table, concatenated and mapped to the embedding space by
//! an MLP.
//!
//! Document tower: an early-fusion transformer over
//! `[CLS] title [SEP] description <image> <context>`, where the image token
//! is a deep-sets pooling of precomputed image vectors and the context token
//! encodes price, age, seller rating, category and condition. The final
//! `[CLS]` state is projected to the embedding space.
//!
//! Both towers L2-normalize their output so the similarity kernel is a dot
//! product.

mod config;
mod document;
mod dropout;
mod query;

pub use config::{CategoricalFeature, ContextSpec, NumericFeature, NumericTransform, TowerConfig};
pub use document::{DocumentEncoding, DocumentInput, DocumentTower};
pub use dropout::{apply_modality_dropout, ModalityDropout, ModalityMask};
pub use query::{QueryInput, QueryTower};

use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, ParamSet, Var};
use crate::nn::Mode;
use crate::{Result, Scalar, Tensor};

/// Both towers plus the configuration they were built from. Parameters are
/// held separately in a [`ParamSet`] under `query.*` and `doc.*` names.
#[derive(Clone, Debug)]
pub struct TwoTowerModel {
    pub config: TowerConfig,
    pub query: QueryTower,
    pub document: DocumentTower,
}

impl TwoTowerModel {
    /// Registers freshly initialised parameters in `params`.
    pub fn new<T: Scalar, R: Rng + ?Sized>(config: TowerConfig, params: &mut ParamSet<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let query = QueryTower::new(&config, params, rng)?;
        let document = DocumentTower::new(&config, params, rng)?;
        Ok(Self { config, query, document })
    }

    /// Rebinds layer handles to an already populated parameter set (e.g. a
    /// loaded checkpoint), checking that every expected name and shape exists.
    pub fn bind<T: Scalar>(config: TowerConfig, params: &ParamSet<T>) -> Result<Self> {
        let mut fresh = ParamSet::<T>::new();
        let mut rng = crate::rng::stream(0, "bind");
        let model = Self::new(config, &mut fresh, &mut rng)?;
        for id in fresh.ids() {
            let name = fresh.name(id);
            let Some(other) = params.id(name) else {
                return Err(crate::Error::Config(alloc::format!("missing parameter {name}")));
            };
            if other != id || params.get(other).shape() != fresh.get(id).shape() {
                return Err(crate::Error::Config(alloc::format!("parameter {name} does not match the model layout")));
            }
        }
        if params.len() != fresh.len() {
            return Err(crate::Error::Config(alloc::format!(
                "checkpoint has {} tensors, model expects {}",
                params.len(),
                fresh.len()
            )));
        }
        Ok(model)
    }

    pub fn encode_queries<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        queries: &[&QueryInput],
    ) -> Result<Var> {
        self.query.encode(g, params, &self.config, queries)
    }

    pub fn encode_documents<T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        docs: &[&DocumentInput],
        mode: Mode,
        rng: &mut R,
    ) -> Result<DocumentEncoding> {
        self.document.encode(g, params, &self.config, docs, mode, rng)
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn absorb_batch_stats<T: Scalar>(&self, g: &Graph<T>, params: &mut ParamSet<T>, enc: &DocumentEncoding) {
        if let Some(stats) = enc.context_normalized.and_then(|v| g.batch_stats(v)) {
            self.document.context.norm.update_running(params, stats);
        }
    }

    /// Inference-mode query embeddings, `chunk` queries per forward pass.
    pub fn embed_queries<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        queries: &[&QueryInput],
        chunk: usize,
    ) -> Result<Vec<Vec<T>>> {
        let mut out = Vec::with_capacity(queries.len());
        for part in queries.chunks(chunk.max(1)) {
            let mut g = Graph::new();
            let v = self.encode_queries(&mut g, params, part)?;
            collect_rows(g.value(v), &mut out);
        }
        Ok(out)
    }

    /// Inference-mode document embeddings, `chunk` documents per forward pass.
    pub fn embed_documents<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        docs: &[&DocumentInput],
        chunk: usize,
    ) -> Result<Vec<Vec<T>>> {
        let mut out = Vec::with_capacity(docs.len());
        let mut rng = crate::rng::stream(0, "inference");
        for part in docs.chunks(chunk.max(1)) {
            let mut g = Graph::new();
            let enc = self.encode_documents(&mut g, params, part, Mode::Infer, &mut rng)?;
            collect_rows(g.value(enc.embeddings), &mut out);
        }
        Ok(out)
    }
}

fn collect_rows<T: Scalar>(t: &Tensor<T>, out: &mut Vec<Vec<T>>) {
    for r in 0..t.rows() {
        out.push(t.row(r).to_vec());
    }
}
