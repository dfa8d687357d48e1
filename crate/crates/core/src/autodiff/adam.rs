use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::params::{ParamGrads, ParamSet};
use crate::{Error, Result, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 4e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moment accumulators for every trainable parameter.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamSet<T>, config: AdamConfig) -> Self {
        let zeros = |params: &ParamSet<T>| {
            params.ids().map(|id| params.is_trainable(id).then(|| Tensor::zeros(params.get(id).shape()))).collect()
        };
        Self { config, step: 0, first: zeros(params), second: zeros(params) }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of every trainable parameter.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamGrads<T>) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(Error::Shape(format!(
                "adam: {} gradients / {} moments for {} parameters",
                grads.len(),
                self.first.len(),
                params.len()
            )));
        }
        let ids: Vec<_> = params.trainable_ids().collect();
        for &id in &ids {
            let g = grads
                .get(id)
                .ok_or_else(|| Error::Contract(format!("adam: missing gradient for {}", params.name(id))))?;
            if g.shape() != params.get(id).shape() {
                return Err(Error::Shape(format!(
                    "adam: gradient {:?} vs parameter {} {:?}",
                    g.shape(),
                    params.name(id),
                    params.get(id).shape()
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let t = self.step as i32;
        let bc1 = T::of(1.0 - libm::pow(c.beta1, t as f64));
        let bc2 = T::of(1.0 - libm::pow(c.beta2, t as f64));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        for id in ids {
            let g = grads.get(id).unwrap().data();
            let m = self.first[id.0].as_mut().unwrap().data_mut();
            let v = self.second[id.0].as_mut().unwrap().data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] = p[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
