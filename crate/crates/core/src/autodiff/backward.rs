use alloc::vec;
use alloc::vec::Vec;

use super::graph::{Graph, Op};
use super::ops::gelu_grad;
use super::ops::sigmoid;
use crate::scalar::{gemm, MatRef};
use crate::{Scalar, Tensor};

impl<T: Scalar> Graph<T> {
    /// Propagates the gradient `g` of node `i` into the gradient slots of its inputs.
    pub(crate) fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), bv.shape()[0], bv.shape()[1]);
                let gm = MatRef::new(gd, m, n, n);
                if let Some(ga) = self.grad_slot(grads, *a) {
                    gemm(T::one(), gm, MatRef::new(bv.data(), k, n, n).t(), T::one(), ga.data_mut(), k);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    gemm(T::one(), MatRef::new(av.data(), m, k, k).t(), gm, T::one(), gb.data_mut(), n);
                }
            }
            Op::Transpose { a } => {
                let (r, c) = (node.value.shape()[1], node.value.shape()[0]);
                if let Some(ga) = self.grad_slot(grads, *a) {
                    let gad = ga.data_mut();
                    for i in 0..r {
                        for j in 0..c {
                            gad[i * c + j] = gad[i * c + j] + gd[j * r + i];
                        }
                    }
                }
            }
            Op::AddBias { x, bias } => {
                self.accumulate(grads, *x, g.clone());
                if let Some(gb) = self.grad_slot(grads, *bias) {
                    let n = gb.len();
                    let gbd = gb.data_mut();
                    for row in gd.chunks(n) {
                        for (o, &v) in gbd.iter_mut().zip(row) {
                            *o = *o + v;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    let neg = Tensor::new(g.shape(), gd.iter().map(|&v| -v).collect()).unwrap();
                    self.accumulate(grads, *b, neg);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let d = gd.iter().zip(bv).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape(), d).unwrap());
                }
                if self.rg(*b) {
                    let d = gd.iter().zip(av).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(g.shape(), d).unwrap());
                }
            }
            Op::Scale { a, factor } => {
                let d = gd.iter().map(|&v| v * *factor).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape(), d).unwrap());
            }
            Op::Gelu { a } => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(&gv, &xv)| gv * gelu_grad(xv)).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape(), d).unwrap());
            }
            Op::Custom { a, derivative } => {
                let (x, y) = (self.value(*a).data(), node.value.data());
                let d = gd.iter().zip(x.iter().zip(y)).map(|(&gv, (&xv, &yv))| gv * derivative(xv, yv)).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape(), d).unwrap());
            }
            Op::EmbeddingBag { table, bags } => {
                if let Some(gt) = self.grad_slot(grads, *table) {
                    let d = gt.cols();
                    let gtd = gt.data_mut();
                    for (b, bag) in bags.iter().enumerate() {
                        if bag.is_empty() {
                            continue;
                        }
                        let inv = T::one() / T::of(bag.len() as f64);
                        let src = &gd[b * d..(b + 1) * d];
                        for &id in bag {
                            for (o, &v) in gtd[id * d..(id + 1) * d].iter_mut().zip(src) {
                                *o = *o + v * inv;
                            }
                        }
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                if let Some(gt) = self.grad_slot(grads, *table) {
                    let d = gt.cols();
                    let gtd = gt.data_mut();
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &v) in gtd[id * d..(id + 1) * d].iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                            *o = *o + v;
                        }
                    }
                }
            }
            Op::RouteRows { sources, routes } => {
                let cols = node.value.cols();
                for (s_idx, &src) in sources.iter().enumerate() {
                    if let Some(gs) = self.grad_slot(grads, src) {
                        let gsd = gs.data_mut();
                        for (row, route) in routes.iter().enumerate() {
                            if let Some((s, r)) = *route {
                                if s == s_idx {
                                    for (o, &v) in
                                        gsd[r * cols..(r + 1) * cols].iter_mut().zip(&gd[row * cols..(row + 1) * cols])
                                    {
                                        *o = *o + v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&gd[r * total + offset..r * total + offset + c]);
                        }
                        self.accumulate(grads, p, Tensor::new(self.shape(p), d).unwrap());
                    }
                    offset += c;
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = node.value.cols();
                let rows = node.value.rows();
                let gam = self.value(*gamma).data();
                if let Some(gg) = self.grad_slot(grads, *gamma) {
                    let ggd = gg.data_mut();
                    for r in 0..rows {
                        for j in 0..d {
                            ggd[j] = ggd[j] + gd[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *beta) {
                    let gbd = gb.data_mut();
                    for r in 0..rows {
                        for j in 0..d {
                            gbd[j] = gbd[j] + gd[r * d + j];
                        }
                    }
                }
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let gxd = gx.data_mut();
                    let inv_d = T::one() / T::of(d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            dxhat[j] = gd[r * d + j] * gam[j];
                            s1 = s1 + dxhat[j];
                            s2 = s2 + dxhat[j] * xhat[r * d + j];
                        }
                        for j in 0..d {
                            let h = xhat[r * d + j];
                            gxd[r * d + j] = gxd[r * d + j] + inv_std[r] * (dxhat[j] - (s1 + h * s2) * inv_d);
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, stats } => {
                let (b, d) = (node.value.shape()[0], node.value.shape()[1]);
                let gam = self.value(*gamma).data();
                if let Some(gg) = self.grad_slot(grads, *gamma) {
                    let ggd = gg.data_mut();
                    for r in 0..b {
                        for j in 0..d {
                            ggd[j] = ggd[j] + gd[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *beta) {
                    let gbd = gb.data_mut();
                    for r in 0..b {
                        for j in 0..d {
                            gbd[j] = gbd[j] + gd[r * d + j];
                        }
                    }
                }
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let gxd = gx.data_mut();
                    if stats.is_some() {
                        // batch statistics depend on x
                        let inv_b = T::one() / T::of(b as f64);
                        for j in 0..d {
                            let mut s1 = T::zero();
                            let mut s2 = T::zero();
                            for r in 0..b {
                                let dh = gd[r * d + j] * gam[j];
                                s1 = s1 + dh;
                                s2 = s2 + dh * xhat[r * d + j];
                            }
                            for r in 0..b {
                                let dh = gd[r * d + j] * gam[j];
                                let h = xhat[r * d + j];
                                gxd[r * d + j] = gxd[r * d + j] + inv_std[j] * (dh - (s1 + h * s2) * inv_b);
                            }
                        }
                    } else {
                        for r in 0..b {
                            for j in 0..d {
                                gxd[r * d + j] = gxd[r * d + j] + gd[r * d + j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                }
            }
            Op::Attention { q, k, v, batch, seq, heads, probs } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let d = node.value.cols();
                let dh = d / heads;
                let scale = T::one() / T::of(dh as f64).sqrt();
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let rows = batch * seq;
                let mut gq = vec![T::zero(); rows * d];
                let mut gk = vec![T::zero(); rows * d];
                let mut gv = vec![T::zero(); rows * d];
                let mut dp = vec![T::zero(); seq * seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = b * seq * d + h * dh;
                        let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                        let pm = MatRef::new(p, seq, seq, seq);
                        let gom = MatRef::new(&gd[off..], seq, dh, d);
                        // dV = P^T dO
                        gemm(T::one(), pm.t(), gom, T::zero(), &mut gv[off..], d);
                        // dP = dO V^T
                        gemm(T::one(), gom, MatRef::new(&vd[off..], seq, dh, d).t(), T::zero(), &mut dp, seq);
                        for i in 0..seq {
                            let prow = &p[i * seq..(i + 1) * seq];
                            let drow = &mut dp[i * seq..(i + 1) * seq];
                            let dot = prow.iter().zip(drow.iter()).fold(T::zero(), |s, (&a, &b)| s + a * b);
                            for (dv, &pv) in drow.iter_mut().zip(prow) {
                                *dv = pv * (*dv - dot);
                            }
                        }
                        let dsm = MatRef::new(&dp, seq, seq, seq);
                        gemm(scale, dsm, MatRef::new(&kd[off..], seq, dh, d), T::zero(), &mut gq[off..], d);
                        gemm(scale, dsm.t(), MatRef::new(&qd[off..], seq, dh, d), T::zero(), &mut gk[off..], d);
                    }
                }
                let shape = node.value.shape();
                self.accumulate(grads, *q, Tensor::new(shape, gq).unwrap());
                self.accumulate(grads, *k, Tensor::new(shape, gk).unwrap());
                self.accumulate(grads, *v, Tensor::new(shape, gv).unwrap());
            }
            Op::RowSoftmax { x } => {
                let c = node.value.cols();
                let y = node.value.data();
                let mut d = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in d.chunks_mut(c).zip(y.chunks(c)).zip(gd.chunks(c)) {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(g.shape(), d).unwrap());
            }
            Op::L2NormalizeRows { x, norms } => {
                let c = node.value.cols();
                let y = node.value.data();
                let mut d = vec![T::zero(); y.len()];
                for (r, n) in norms.iter().enumerate() {
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &gd[r * c..(r + 1) * c];
                    let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    for j in 0..c {
                        d[r * c + j] = (gr[j] - yr[j] * dot) / *n;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(g.shape(), d).unwrap());
            }
            Op::RowDot { a, b } => {
                let c = self.value(*a).cols();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let d = bv.iter().enumerate().map(|(i, &y)| y * gd[i / c]).collect();
                    self.accumulate(grads, *a, Tensor::new(self.shape(*a), d).unwrap());
                }
                if self.rg(*b) {
                    let d = av.iter().enumerate().map(|(i, &x)| x * gd[i / c]).collect();
                    self.accumulate(grads, *b, Tensor::new(self.shape(*b), d).unwrap());
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let c = self.value(*logits).cols();
                let scale = gd[0] / T::of(targets.len().max(1) as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * c + t] = d[i * c + t] - scale;
                }
                self.accumulate(grads, *logits, Tensor::new(self.shape(*logits), d).unwrap());
            }
            Op::SigmoidBce { logits, labels, floor } => {
                let z = self.value(*logits).data();
                let scale = gd[0] / T::of(labels.len().max(1) as f64);
                let d = z
                    .iter()
                    .zip(labels)
                    .map(|(&zv, &y)| {
                        let c = sigmoid(zv);
                        // clamped branches are constant in z
                        let pos = if c > *floor { c - T::one() } else { T::zero() };
                        let neg = if T::one() - c > *floor { c } else { T::zero() };
                        scale * (y * pos + (T::one() - y) * neg)
                    })
                    .collect();
                self.accumulate(grads, *logits, Tensor::new(self.shape(*logits), d).unwrap());
            }
            Op::Sum { a } => {
                let shape = self.shape(*a);
                self.accumulate(grads, *a, Tensor::full(shape, gd[0]));
            }
            Op::Mean { a } => {
                let shape = self.shape(*a);
                let n = T::of(self.value(*a).len().max(1) as f64);
                self.accumulate(grads, *a, Tensor::full(shape, gd[0] / n));
            }
            Op::Reshape { a } => {
                let t = g.clone().reshape(self.shape(*a)).unwrap();
                self.accumulate(grads, *a, t);
            }
        }
    }
}
