use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::dropout::ModalityDropout;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NumericTransform {
    Identity,
    /// `ln(x)`, for strictly positive features.
    Log,
    /// `ln(1 + x)`, for non-negative features.
    Log1p,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumericFeature {
    pub name: String,
    pub transform: NumericTransform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalFeature {
    pub name: String,
    pub cardinality: usize,
}

/// Ordered description of the contextual features fed to the context encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextSpec {
    pub numeric: Vec<NumericFeature>,
    pub categorical: Vec<CategoricalFeature>,
}

impl ContextSpec {
    /// price, age_days, seller_rating; category, condition.
    pub fn marketplace(categories: usize) -> Self {
        let num = |name: &str, transform| NumericFeature { name: name.into(), transform };
        let cat = |name: &str, cardinality| CategoricalFeature { name: name.into(), cardinality };
        Self {
            numeric: vec![
                num("price", NumericTransform::Log),
                num("age_days", NumericTransform::Log1p),
                num("seller_rating", NumericTransform::Identity),
            ],
            categorical: vec![cat("category", categories), cat("condition", 4)],
        }
    }

    /// Width of the concatenated numeric + one-hot vector.
    pub fn width(&self) -> usize {
        self.numeric.len() + self.categorical.iter().map(|c| c.cardinality).sum::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TowerConfig {
    /// Output embedding size D.
    pub embedding_dim: usize,
    pub trigram_vocab: usize,
    pub word_vocab: usize,
    pub fusion_layers: usize,
    pub heads: usize,
    /// Token width inside the fusion transformer and the query tower.
    pub hidden_dim: usize,
    pub ff_dim: usize,
    /// Word-token budget for title + description.
    pub max_text_tokens: usize,
    pub image_vec_dim: usize,
    pub max_images: usize,
    pub context: ContextSpec,
    pub dropout: ModalityDropout,
    /// Std of embedding-table initialisation.
    pub embedding_init_std: f64,
    /// Weight scale of both towers' output layers relative to their bias.
    pub output_init_gain: f64,
}

impl Default for TowerConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 64,
            trigram_vocab: 4096,
            word_vocab: 2048,
            fusion_layers: 2,
            heads: 4,
            hidden_dim: 64,
            ff_dim: 128,
            max_text_tokens: 32,
            image_vec_dim: 16,
            max_images: 3,
            context: ContextSpec::marketplace(12),
            dropout: ModalityDropout::NONE,
            embedding_init_std: 0.1,
            output_init_gain: 0.05,
        }
    }
}

impl TowerConfig {
    /// Smallest configuration used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            embedding_dim: 8,
            trigram_vocab: 31,
            word_vocab: 17,
            fusion_layers: 1,
            heads: 2,
            hidden_dim: 8,
            ff_dim: 8,
            max_text_tokens: 4,
            image_vec_dim: 3,
            max_images: 3,
            context: ContextSpec::marketplace(3),
            dropout: ModalityDropout::NONE,
            embedding_init_std: 0.5,
            output_init_gain: 1.0,
        }
    }

    /// Fused sequence positions: `[CLS]`, text tokens and `[SEP]`, image, context.
    pub fn max_sequence(&self) -> usize {
        self.max_text_tokens + 4
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embedding_dim", self.embedding_dim),
            ("trigram_vocab", self.trigram_vocab),
            ("word_vocab", self.word_vocab),
            ("heads", self.heads),
            ("hidden_dim", self.hidden_dim),
            ("ff_dim", self.ff_dim),
            ("max_text_tokens", self.max_text_tokens),
            ("image_vec_dim", self.image_vec_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!("hidden_dim {} not divisible by {} heads", self.hidden_dim, self.heads)));
        }
        if self.context.categorical.iter().any(|c| c.cardinality == 0) {
            return Err(Error::Config("categorical feature with zero cardinality".into()));
        }
        self.dropout.validate()
    }
}
