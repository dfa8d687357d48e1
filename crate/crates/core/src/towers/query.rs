use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use super::config::TowerConfig;
use crate::autodiff::{Graph, ParamId, ParamSet, Var};
use crate::nn::Mlp;
use crate::text::{char_trigram_ids, normalize, word_ids};
use crate::{Error, Result, Scalar};

/// A search query with its two granularities of token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryInput {
    /// Normalized text.
    pub raw_text: String,
    pub trigram_ids: Vec<usize>,
    pub token_ids: Vec<usize>,
}

impl QueryInput {
    pub fn from_text(text: &str, config: &TowerConfig) -> Result<Self> {
        let raw_text = normalize(text);
        if raw_text.is_empty() {
            return Err(Error::Input("query text is empty after normalization".into()));
        }
        Ok(Self {
            trigram_ids: char_trigram_ids(&raw_text, config.trigram_vocab),
            token_ids: word_ids(&raw_text, config.word_vocab),
            raw_text,
        })
    }
}

#[derive(Clone, Debug)]
pub struct QueryTower {
    pub trigram_table: ParamId,
    pub word_table: ParamId,
    pub mlp: Mlp,
}

impl QueryTower {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        config: &TowerConfig,
        params: &mut ParamSet<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let e = config.hidden_dim;
        let std = config.embedding_init_std;
        Ok(Self {
            trigram_table: params.add_normal("query.trigram_embedding", &[config.trigram_vocab, e], std, rng)?,
            word_table: params.add_normal("query.word_embedding", &[config.word_vocab, e], std, rng)?,
            mlp: Mlp::with_output_gain(
                params,
                "query.mlp",
                (2 * e, e, config.embedding_dim),
                config.output_init_gain,
                rng,
            )?,
        })
    }

    /// `[B, D]` unit-norm query embeddings.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        config: &TowerConfig,
        queries: &[&QueryInput],
    ) -> Result<Var> {
        for q in queries {
            if q.trigram_ids.is_empty() {
                return Err(Error::Input(format!("query {:?} has no trigrams", q.raw_text)));
            }
            if let Some(&t) = q.token_ids.iter().find(|&&t| t >= config.word_vocab) {
                return Err(Error::Index(format!("word id {t} >= vocabulary {}", config.word_vocab)));
            }
        }
        let tri_bags: Vec<Vec<usize>> = queries.iter().map(|q| q.trigram_ids.clone()).collect();
        let word_bags: Vec<Vec<usize>> = queries.iter().map(|q| q.token_ids.clone()).collect();
        let tri = g.param(params, self.trigram_table);
        let words = g.param(params, self.word_table);
        let tri = g.embedding_bag(tri, &tri_bags)?;
        let words = g.embedding_bag(words, &word_bags)?;
        let joined = g.concat_cols(&[tri, words])?;
        let out = self.mlp.forward(g, params, joined)?;
        Ok(g.l2_normalize_rows(out))
    }
}
