use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParamSet;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates sampled per parameter (all of them when the parameter is smaller).
    pub max_coords: usize,
    /// Denominator floor of the relative error. Central differences at
    /// h = 1e-5 carry roundoff near 1e-10, so exactly-zero gradients (e.g.
    /// attention key biases) need a floor well above that.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, max_coords: 64, floor: 1e-5, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compares backward-pass gradients against central finite differences.
///
/// `build` must construct the same scalar output from `params` every time it
/// is called. The relative error of a coordinate is
/// `|analytic - numeric| / max(|analytic| + |numeric|, floor)`.
pub fn gradient_check<F>(params: &mut ParamSet<f64>, build: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>,
{
    let eval = |params: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = build(&mut g, params)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(Error::Contract(alloc::format!("gradient check needs a scalar output, got {:?}", v.shape())));
        }
        Ok(v.item())
    };
    let mut g = Graph::new();
    let out = build(&mut g, params)?;
    let analytic = g.backward(out)?.param_grads(params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = Vec::new();
    let ids: Vec<_> = params.trainable_ids().collect();
    for id in ids {
        let n = params.get(id).len();
        let coords: Vec<usize> =
            if n <= cfg.max_coords { (0..n).collect() } else { sample(&mut rng, n, cfg.max_coords).into_vec() };
        let mut worst = 0.0f64;
        for &c in &coords {
            let orig = params.get(id).data()[c];
            params.get_mut(id).data_mut()[c] = orig + cfg.step;
            let plus = eval(params);
            params.get_mut(id).data_mut()[c] = orig - cfg.step;
            let minus = eval(params);
            params.get_mut(id).data_mut()[c] = orig;
            let numeric = (plus? - minus?) / (2.0 * cfg.step);
            let a = analytic.get(id).map_or(0.0, |t| t.data()[c]);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(cfg.floor);
            worst = worst.max(rel);
        }
        report.push(ParamCheck { name: params.name(id).into(), coords: coords.len(), max_rel_error: worst });
    }
    Ok(GradCheckReport { params: report })
}
