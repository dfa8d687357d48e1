use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::config::{NumericTransform, TowerConfig};
use super::dropout::ModalityMask;
use crate::autodiff::{Graph, ParamId, ParamSet, Var};
use crate::nn::{BatchNorm, LayerNorm, Linear, Mlp, Mode, TransformerBlock};
use crate::text::word_ids;
use crate::{Error, Result, Scalar, Tensor};

/// Model-visible view of a catalog item.
#[derive(Clone, Debug, PartialEq)]
pub struct DocumentInput {
    pub title_token_ids: Vec<usize>,
    pub description_token_ids: Vec<usize>,
    pub image_vectors: Vec<Vec<f32>>,
    /// Raw values in [`ContextSpec::numeric`](super::ContextSpec) order.
    pub context_numeric: Vec<f64>,
    /// Ids in [`ContextSpec::categorical`](super::ContextSpec) order.
    pub context_categorical: Vec<usize>,
}

impl DocumentInput {
    pub fn from_text(
        title: &str,
        description: &str,
        image_vectors: Vec<Vec<f32>>,
        context_numeric: Vec<f64>,
        context_categorical: Vec<usize>,
        config: &TowerConfig,
    ) -> Self {
        Self {
            title_token_ids: word_ids(title, config.word_vocab),
            description_token_ids: word_ids(description, config.word_vocab),
            image_vectors,
            context_numeric,
            context_categorical,
        }
    }

    /// Title then description word ids, truncated to `budget` tokens.
    pub fn text_ids(&self, budget: usize) -> impl Iterator<Item = usize> + '_ {
        self.title_token_ids.iter().chain(&self.description_token_ids).copied().take(budget)
    }
}

#[derive(Clone, Debug)]
pub struct ContextEncoder {
    pub norm: BatchNorm,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    /// Shared per-image transform.
    pub item: Linear,
    /// Projection of the pooled set; bias-free so an empty set stays zero.
    pub proj: Linear,
}

#[derive(Clone, Debug)]
pub struct DocumentTower {
    pub word_table: ParamId,
    pub cls: ParamId,
    pub sep: ParamId,
    pub positions: ParamId,
    pub image: ImageEncoder,
    pub context: ContextEncoder,
    pub blocks: Vec<TransformerBlock>,
    pub final_norm: LayerNorm,
    pub proj: Linear,
}

/// Graph handles produced by one document-tower forward pass.
#[derive(Clone, Debug)]
pub struct DocumentEncoding {
    /// `[B, D]` unit-norm embeddings.
    pub embeddings: Var,
    pub image_tokens: Var,
    pub context_tokens: Var,
    /// Batch-normalized context features (before the MLP).
    pub context_normalized_features: Var,
    /// Same node when it carries train-mode batch statistics.
    pub context_normalized: Option<Var>,
    pub masks: Vec<ModalityMask>,
}

const SRC_TEXT: usize = 0;
const SRC_CLS: usize = 1;
const SRC_SEP: usize = 2;
const SRC_IMAGE: usize = 3;
const SRC_CONTEXT: usize = 4;

impl DocumentTower {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        config: &TowerConfig,
        params: &mut ParamSet<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let d = config.hidden_dim;
        let std = config.embedding_init_std;
        let word_table = params.add_normal("doc.word_embedding", &[config.word_vocab, d], std, rng)?;
        let cls = params.add_normal("doc.cls", &[1, d], std, rng)?;
        let sep = params.add_normal("doc.sep", &[1, d], std, rng)?;
        let positions = params.add_normal("doc.position_embedding", &[config.max_sequence(), d], std, rng)?;
        let image = ImageEncoder {
            item: Linear::new(params, "doc.image.item", config.image_vec_dim, d, true, rng)?,
            proj: Linear::new(params, "doc.image.proj", d, d, false, rng)?,
        };
        let context = ContextEncoder {
            norm: BatchNorm::new(params, "doc.context.norm", config.context.width())?,
            mlp: Mlp::new(params, "doc.context.mlp", (config.context.width(), d, d), rng)?,
        };
        let blocks = (0..config.fusion_layers)
            .map(|l| TransformerBlock::new(params, &format!("doc.fusion.{l}"), d, config.ff_dim, config.heads, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            word_table,
            cls,
            sep,
            positions,
            image,
            context,
            blocks,
            final_norm: LayerNorm::new(params, "doc.final_norm", d)?,
            proj: Linear::output_layer(params, "doc.proj", d, config.embedding_dim, config.output_init_gain, rng)?,
        })
    }

    /// Numeric features (transformed) followed by one-hot categorical features.
    pub fn context_features<T: Scalar>(config: &TowerConfig, doc: &DocumentInput) -> Result<Vec<T>> {
        let spec = &config.context;
        if doc.context_numeric.len() != spec.numeric.len() || doc.context_categorical.len() != spec.categorical.len() {
            return Err(Error::Input(format!(
                "context has {} numeric / {} categorical values, expected {} / {}",
                doc.context_numeric.len(),
                doc.context_categorical.len(),
                spec.numeric.len(),
                spec.categorical.len()
            )));
        }
        let mut out = Vec::with_capacity(spec.width());
        for (f, &v) in spec.numeric.iter().zip(&doc.context_numeric) {
            let x = match f.transform {
                NumericTransform::Identity => v,
                NumericTransform::Log if v > 0.0 => libm::log(v),
                NumericTransform::Log1p if v >= 0.0 => libm::log1p(v),
                _ => return Err(Error::Input(format!("feature {} value {v} outside transform domain", f.name))),
            };
            if !x.is_finite() {
                return Err(Error::Input(format!("feature {} is not finite", f.name)));
            }
            out.push(T::of(x));
        }
        for (f, &id) in spec.categorical.iter().zip(&doc.context_categorical) {
            if id >= f.cardinality {
                return Err(Error::Input(format!("{} id {id} outside 0..{}", f.name, f.cardinality)));
            }
            out.extend((0..f.cardinality).map(|k| if k == id { T::one() } else { T::zero() }));
        }
        Ok(out)
    }

    /// Context tokens `[B, d]`, plus the normalized features that feed the MLP.
    pub fn encode_context<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        config: &TowerConfig,
        docs: &[&DocumentInput],
        mode: Mode,
    ) -> Result<(Var, Var)> {
        let w = config.context.width();
        let mut feats = Vec::with_capacity(docs.len() * w);
        for doc in docs {
            feats.extend(Self::context_features::<T>(config, doc)?);
        }
        let x = g.constant(Tensor::new(&[docs.len(), w], feats)?);
        let normalized = self.context.norm.forward(g, params, x, mode)?;
        let token = self.context.mlp.forward(g, params, normalized)?;
        Ok((normalized, token))
    }

    /// Deep-sets image tokens `[B, d]`: shared per-image transform, mean over
    /// the document's images, bias-free projection. No images gives a zero token.
    pub fn fuse_images<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        config: &TowerConfig,
        docs: &[&DocumentInput],
    ) -> Result<Var> {
        let dim = config.image_vec_dim;
        let mut flat = Vec::new();
        let mut bags = Vec::with_capacity(docs.len());
        let mut next = 0;
        for doc in docs {
            let mut bag = Vec::with_capacity(doc.image_vectors.len());
            for v in &doc.image_vectors {
                if v.len() != dim {
                    return Err(Error::Input(format!("image vector has {} dims, expected {dim}", v.len())));
                }
                flat.extend(v.iter().map(|&x| T::of(x as f64)));
                bag.push(next);
                next += 1;
            }
            bags.push(bag);
        }
        let images = g.constant(Tensor::new(&[next, dim], flat)?);
        let h = self.image.item.forward(g, params, images)?;
        let h = g.gelu(h);
        let pooled = g.embedding_bag(h, &bags)?;
        self.image.proj.forward(g, params, pooled)
    }

    pub fn encode<T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        config: &TowerConfig,
        docs: &[&DocumentInput],
        mode: Mode,
        rng: &mut R,
    ) -> Result<DocumentEncoding> {
        let d = config.hidden_dim;
        let budget = config.max_text_tokens;
        let batch = docs.len();
        let text: Vec<Vec<usize>> = docs.iter().map(|doc| doc.text_ids(budget).collect()).collect();
        if let Some(&t) = text.iter().flatten().find(|&&t| t >= config.word_vocab) {
            return Err(Error::Index(format!("word id {t} >= vocabulary {}", config.word_vocab)));
        }
        // [CLS] + words + [SEP] + image + context
        let seq = text.iter().map(|t| t.len() + 4).max().unwrap_or(4);
        let masks: Vec<ModalityMask> = docs.iter().map(|_| config.dropout.sample(rng, mode)).collect();

        let (normalized, context_tokens) = self.encode_context(g, params, config, docs, mode)?;
        let image_tokens = self.fuse_images(g, params, config, docs)?;
        let flat_ids: Vec<usize> = text.iter().flatten().copied().collect();
        let table = g.param(params, self.word_table);
        let words = g.gather_rows(table, &flat_ids)?;
        let cls = g.param(params, self.cls);
        let sep = g.param(params, self.sep);

        let mut routes = vec![None; batch * seq];
        let mut pos_ids = vec![0usize; batch * seq];
        let mut padding = vec![true; batch * seq];
        let mut word_offset = 0;
        for (b, ids) in text.iter().enumerate() {
            let row = |t: usize| b * seq + t;
            let m = masks[b];
            routes[row(0)] = Some((SRC_CLS, 0));
            for k in 0..ids.len() {
                routes[row(1 + k)] = (!m.text).then_some((SRC_TEXT, word_offset + k));
                pos_ids[row(1 + k)] = 1 + k;
            }
            word_offset += ids.len();
            let n = ids.len();
            routes[row(n + 1)] = (!m.text).then_some((SRC_SEP, 0));
            pos_ids[row(n + 1)] = n + 1;
            routes[row(n + 2)] = (!m.image).then_some((SRC_IMAGE, b));
            pos_ids[row(n + 2)] = budget + 2;
            routes[row(n + 3)] = (!m.context).then_some((SRC_CONTEXT, b));
            pos_ids[row(n + 3)] = budget + 3;
            padding[row(0)..=row(n + 3)].iter_mut().for_each(|p| *p = false);
        }
        let tokens = g.route_rows(&[words, cls, sep, image_tokens, context_tokens], &routes, d)?;
        let pos_table = g.param(params, self.positions);
        let pos = g.gather_rows(pos_table, &pos_ids)?;
        let x = g.add(tokens, pos)?;
        let mut x = g.reshape(x, &[batch, seq, d])?;
        for block in &self.blocks {
            x = block.forward(g, params, x, &padding)?;
        }
        let flat = g.reshape(x, &[batch * seq, d])?;
        let cls_rows: Vec<usize> = (0..batch).map(|b| b * seq).collect();
        let h = g.gather_rows(flat, &cls_rows)?;
        let h = self.final_norm.forward(g, params, h)?;
        let out = self.proj.forward(g, params, h)?;
        let embeddings = g.l2_normalize_rows(out);
        Ok(DocumentEncoding {
            embeddings,
            image_tokens,
            context_tokens,
            context_normalized_features: normalized,
            context_normalized: (mode == Mode::Train).then_some(normalized),
            masks,
        })
    }
}
