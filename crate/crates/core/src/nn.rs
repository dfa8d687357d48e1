//! Layers built from graph primitives.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Graph, ParamId, ParamSet, Var};
use crate::{Error, Result, Scalar, Tensor};

/// Training mode enables batch statistics and modality dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / libm::sqrt(in_dim.max(1) as f64);
        let weight = params.add_normal(&format!("{name}.weight"), &[in_dim, out_dim], std, rng)?;
        let bias = if bias { Some(params.add(&format!("{name}.bias"), Tensor::zeros(&[out_dim]))?) } else { None };
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    /// Output layer feeding an L2 normalization: weights scaled by `gain`
    /// and a random bias of roughly unit norm. With a small gain every input
    /// maps close to the bias direction, so freshly initialised pairwise
    /// cosines are nearly equal.
    pub fn output_layer<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let std = gain / libm::sqrt(in_dim.max(1) as f64);
        let weight = params.add_normal(&format!("{name}.weight"), &[in_dim, out_dim], std, rng)?;
        let bias_std = 1.0 / libm::sqrt(out_dim.max(1) as f64);
        let bias = params.add_normal(&format!("{name}.bias"), &[out_dim], bias_std, rng)?;
        Ok(Self { weight, bias: Some(bias), in_dim, out_dim })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, params: &ParamSet<T>, x: Var) -> Result<Var> {
        let w = g.param(params, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(params, b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// `Linear -> GELU -> Linear`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        dims: (usize, usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(params, &format!("{name}.0"), dims.0, dims.1, true, rng)?,
            output: Linear::new(params, &format!("{name}.1"), dims.1, dims.2, true, rng)?,
        })
    }

    /// MLP whose second layer is a [`Linear::output_layer`].
    pub fn with_output_gain<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        dims: (usize, usize, usize),
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(params, &format!("{name}.0"), dims.0, dims.1, true, rng)?,
            output: Linear::output_layer(params, &format!("{name}.1"), dims.1, dims.2, gain, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, params: &ParamSet<T>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, params, x)?;
        let h = g.gelu(h);
        self.output.forward(g, params, h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(params: &mut ParamSet<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: params.add(&format!("{name}.gamma"), Tensor::full(&[dim], T::one()))?,
            beta: params.add(&format!("{name}.beta"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, params: &ParamSet<T>, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(params, self.gamma), g.param(params, self.beta));
        g.layer_norm(x, gm, bt)
    }
}

/// Batch norm with learned scale/shift and running statistics kept as buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(params: &mut ParamSet<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: params.add(&format!("{name}.gamma"), Tensor::full(&[dim], T::one()))?,
            beta: params.add(&format!("{name}.beta"), Tensor::zeros(&[dim]))?,
            running_mean: params.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[dim]))?,
            running_var: params.add_buffer(&format!("{name}.running_var"), Tensor::full(&[dim], T::one()))?,
            momentum: 0.1,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, params: &ParamSet<T>, x: Var, mode: Mode) -> Result<Var> {
        let (gm, bt) = (g.param(params, self.gamma), g.param(params, self.beta));
        match mode {
            Mode::Train => g.batch_norm_train(x, gm, bt),
            Mode::Infer => {
                let mean = params.get(self.running_mean).data();
                let var = params.get(self.running_var).data();
                g.batch_norm_infer(x, gm, bt, mean, var)
            }
        }
    }

    /// Exponential moving update of the running statistics; the running
    /// variance uses the unbiased batch variance.
    pub fn update_running<T: Scalar>(&self, params: &mut ParamSet<T>, stats: &BatchStats<T>) {
        let m = T::of(self.momentum);
        let unbias = T::of(stats.batch as f64 / (stats.batch.max(2) - 1) as f64);
        let rm = params.get_mut(self.running_mean).data_mut();
        for (r, &b) in rm.iter_mut().zip(&stats.mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        let rv = params.get_mut(self.running_var).data_mut();
        for (r, &b) in rv.iter_mut().zip(&stats.var) {
            *r = (T::one() - m) * *r + m * b * unbias;
        }
    }
}

/// Pre-norm transformer encoder block:
/// `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln_attn: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub attn_out: Linear,
    pub ln_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub heads: usize,
    pub width: usize,
}

impl TransformerBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        width: usize,
        ff_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!("width {width} is not divisible by {heads} heads")));
        }
        Ok(Self {
            ln_attn: LayerNorm::new(params, &format!("{name}.ln_attn"), width)?,
            query: Linear::new(params, &format!("{name}.attn.query"), width, width, true, rng)?,
            key: Linear::new(params, &format!("{name}.attn.key"), width, width, true, rng)?,
            value: Linear::new(params, &format!("{name}.attn.value"), width, width, true, rng)?,
            attn_out: Linear::new(params, &format!("{name}.attn.out"), width, width, true, rng)?,
            ln_ff: LayerNorm::new(params, &format!("{name}.ln_ff"), width)?,
            ff_in: Linear::new(params, &format!("{name}.ff.0"), width, ff_dim, true, rng)?,
            ff_out: Linear::new(params, &format!("{name}.ff.1"), ff_dim, width, true, rng)?,
            heads,
            width,
        })
    }

    /// `x` is `[B, T, d]`; `padding[b * T + t]` marks padded positions.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, params: &ParamSet<T>, x: Var, padding: &[bool]) -> Result<Var> {
        let (batch, seq, width) = match *g.shape(x) {
            [b, t, d] => (b, t, d),
            ref s => return Err(Error::Shape(format!("transformer block expects [B, T, d], got {s:?}"))),
        };
        if width != self.width {
            return Err(Error::Shape(format!("transformer block width {} got input width {width}", self.width)));
        }
        let valid: Vec<bool> = padding.iter().map(|&p| !p).collect();
        let flat = g.reshape(x, &[batch * seq, width])?;
        let h = self.ln_attn.forward(g, params, flat)?;
        let q = self.query.forward(g, params, h)?;
        let k = self.key.forward(g, params, h)?;
        let v = self.value.forward(g, params, h)?;
        let a = g.attention(q, k, v, batch, seq, self.heads, &valid)?;
        let a = self.attn_out.forward(g, params, a)?;
        let x1 = g.add(flat, a)?;
        let h = self.ln_ff.forward(g, params, x1)?;
        let h = self.ff_in.forward(g, params, h)?;
        let h = g.gelu(h);
        let h = self.ff_out.forward(g, params, h)?;
        let x2 = g.add(x1, h)?;
        g.reshape(x2, &[batch, seq, width])
    }
}
