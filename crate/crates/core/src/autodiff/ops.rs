use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::graph::{BatchStats, Graph, Op, Var};
use crate::scalar::{gemm, MatRef};
use crate::{Error, Result, Scalar, Tensor};

pub(crate) const NORM_EPS: f64 = 1e-5;
pub(crate) const MASK_LOGIT: f64 = -1e9;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`; saturates cleanly for large `|u|`.
fn fast_tanh<T: Scalar>(u: T) -> T {
    let two = T::of(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + fast_tanh(c * (x + a * x * x * x)))
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = fast_tanh(c * (x + a * x * x * x));
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

pub(crate) fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Softmax of `row` in place, stabilised by subtracting the row maximum.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

impl<T: Scalar> Graph<T> {
    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("{op}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn need_2d(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::Shape(format!("{op}: expected a 2-d array, got {s:?}"))),
        }
    }

    fn map_unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(x.shape(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    /// Matrix product. `a` may have leading batch dimensions, which are
    /// flattened into rows; `b` must be 2-d.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() >= 2 && sb.len() == 2 && sa[sa.len() - 1] == sb[0];
        if !ok {
            return Err(Error::Shape(format!("matmul: cannot multiply {sa:?} by {sb:?}")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), sb[0], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(T::one(), MatRef::new(av.data(), m, k, k), MatRef::new(bv.data(), k, n, n), T::zero(), &mut out, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul { a, b }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.need_2d(a, "transpose")?;
        let x = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose { a }, rg))
    }

    /// Adds a bias vector to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(bias).len() != n {
            return Err(Error::Shape(format!(
                "add_bias: bias {:?} does not match {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias { x, bias }, rg))
    }

    fn zip_binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        self.map_unary(a, |v| v * factor, Op::Scale { a, factor })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map_unary(a, gelu, Op::Gelu { a })
    }

    /// Elementwise op with a caller-supplied derivative `d(x, y)` where `y = f(x)`.
    pub fn custom_unary(&mut self, a: Var, f: fn(T) -> T, derivative: fn(T, T) -> T) -> Var {
        self.map_unary(a, f, Op::Custom { a, derivative })
    }

    /// Row `b` of the output is the mean of `table` rows listed in `bags[b]`;
    /// an empty bag yields a zero row.
    pub fn embedding_bag(&mut self, table: Var, bags: &[Vec<usize>]) -> Result<Var> {
        let (v, d) = self.need_2d(table, "embedding_bag")?;
        let t = self.value(table).data();
        let mut out = vec![T::zero(); bags.len() * d];
        for (b, bag) in bags.iter().enumerate() {
            if bag.is_empty() {
                continue;
            }
            let row = &mut out[b * d..(b + 1) * d];
            for &id in bag {
                if id >= v {
                    return Err(Error::Index(format!("embedding_bag: id {id} >= vocabulary {v}")));
                }
                for (o, &x) in row.iter_mut().zip(&t[id * d..(id + 1) * d]) {
                    *o = *o + x;
                }
            }
            let inv = T::one() / T::of(bag.len() as f64);
            row.iter_mut().for_each(|o| *o = *o * inv);
        }
        let rg = self.rg(table);
        Ok(self.push(Tensor::new(&[bags.len(), d], out)?, Op::EmbeddingBag { table, bags: bags.to_vec() }, rg))
    }

    /// Selects rows of a 2-d array.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.need_2d(table, "gather_rows")?;
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index(format!("gather_rows: row {id} >= {v}")));
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(Tensor::new(&[ids.len(), d], out)?, Op::GatherRows { table, ids: ids.to_vec() }, rg))
    }

    /// Assembles a new 2-d array row by row: `routes[i] = Some((s, r))` copies
    /// row `r` of `sources[s]`, `None` writes a zero row.
    pub fn route_rows(&mut self, sources: &[Var], routes: &[Option<(usize, usize)>], cols: usize) -> Result<Var> {
        for &s in sources {
            let (_, c) = self.need_2d(s, "route_rows")?;
            if c != cols {
                return Err(Error::Shape(format!("route_rows: source has {c} columns, expected {cols}")));
            }
        }
        let mut out = vec![T::zero(); routes.len() * cols];
        for (i, route) in routes.iter().enumerate() {
            if let Some((s, r)) = *route {
                let src = sources.get(s).ok_or_else(|| Error::Index(format!("route_rows: source {s}")))?;
                let val = self.value(*src);
                if r >= val.rows() {
                    return Err(Error::Index(format!("route_rows: row {r} of source {s}")));
                }
                out[i * cols..(i + 1) * cols].copy_from_slice(val.row(r));
            }
        }
        let rg = sources.iter().any(|&s| self.rg(s));
        Ok(self.push(
            Tensor::new(&[routes.len(), cols], out)?,
            Op::RouteRows { sources: sources.to_vec(), routes: routes.to_vec() },
            rg,
        ))
    }

    /// Concatenates 2-d arrays with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mut rows = None;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.need_2d(p, "concat_cols")?;
            if *rows.get_or_insert(r) != r {
                return Err(Error::Shape("concat_cols: row counts differ".into()));
            }
            total += c;
        }
        let rows = rows.unwrap_or(0);
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&[rows, total], out)?, Op::ConcatCols { parts: parts.to_vec() }, rg))
    }

    /// Normalizes each row over the last dimension, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::Shape(format!("layer_norm: scale/shift must have {d} entries")));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.rows();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        let inv_d = T::one() / T::of(d as f64);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) * inv_d;
            let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) * inv_d;
            let is = T::one() / (var + T::of(NORM_EPS)).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    /// Train-mode batch norm over a `[B, d]` array using batch statistics.
    /// The statistics are available afterwards through [`Graph::batch_stats`].
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (b, d) = self.need_2d(x, "batch_norm")?;
        if b < 2 {
            return Err(Error::Batch(format!("batch_norm in train mode needs at least 2 rows, got {b}")));
        }
        let xv = self.value(x).data();
        let mut mean = vec![T::zero(); d];
        let mut var = vec![T::zero(); d];
        let inv_b = T::one() / T::of(b as f64);
        for r in 0..b {
            for j in 0..d {
                mean[j] = mean[j] + xv[r * d + j];
            }
        }
        mean.iter_mut().for_each(|m| *m = *m * inv_b);
        for r in 0..b {
            for j in 0..d {
                let c = xv[r * d + j] - mean[j];
                var[j] = var[j] + c * c;
            }
        }
        var.iter_mut().for_each(|v| *v = *v * inv_b);
        let stats = BatchStats { mean: mean.clone(), var: var.clone(), batch: b };
        self.batch_norm_with(x, gamma, beta, &mean, &var, Some(stats))
    }

    /// Inference-mode batch norm with fixed statistics.
    pub fn batch_norm_infer(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T]) -> Result<Var> {
        self.batch_norm_with(x, gamma, beta, mean, var, None)
    }

    fn batch_norm_with(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        stats: Option<BatchStats<T>>,
    ) -> Result<Var> {
        let (b, d) = self.need_2d(x, "batch_norm")?;
        if self.value(gamma).len() != d || self.value(beta).len() != d || mean.len() != d || var.len() != d {
            return Err(Error::Shape(format!("batch_norm: per-feature arrays must have {d} entries")));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(NORM_EPS)).sqrt()).collect();
        let xv = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); b * d];
        let mut out = vec![T::zero(); b * d];
        for r in 0..b {
            for j in 0..d {
                let h = (xv[r * d + j] - mean[j]) * inv_std[j];
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bt[j];
            }
        }
        let train = stats.is_some();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let out = Tensor::new(&[b, d], out)?;
        let v = self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, stats }, rg);
        debug_assert!(train == self.batch_stats(v).is_some());
        Ok(v)
    }

    /// Multi-head scaled dot-product self-attention over `batch` sequences of
    /// length `seq`. `q`, `k`, `v` are `[batch * seq, d]`; `key_valid[i]`
    /// false marks row `i` as padding, which receives a -1e9 logit as a key.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        key_valid: &[bool],
    ) -> Result<Var> {
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        let (rows, d) = self.need_2d(q, "attention")?;
        if rows != batch * seq || key_valid.len() != rows {
            return Err(Error::Shape(format!("attention: {rows} rows for batch {batch} x seq {seq}")));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("attention: width {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); rows * d];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                let qm = MatRef::new(&qd[off..], seq, dh, d);
                let km = MatRef::new(&kd[off..], seq, dh, d);
                gemm(scale, qm, km.t(), T::zero(), p, seq);
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    for (j, val) in row.iter_mut().enumerate() {
                        if !key_valid[b * seq + j] {
                            *val = *val + T::of(MASK_LOGIT);
                        }
                    }
                    softmax_in_place(row);
                }
                let vm = MatRef::new(&vd[off..], seq, dh, d);
                gemm(T::one(), MatRef::new(p, seq, seq, seq), vm, T::zero(), &mut out[off..], d);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let out = Tensor::new(&[rows, d], out)?;
        Ok(self.push(out, Op::Attention { q, k, v, batch, seq, heads, probs }, rg))
    }

    /// Softmax over each row of a 2-d array.
    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.need_2d(x, "row_softmax")?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::RowSoftmax { x }, rg))
    }

    /// Scales every row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = out.cols();
        let mut norms = Vec::with_capacity(out.rows());
        for row in out.data_mut().chunks_mut(c.max(1)) {
            let n = row.iter().fold(T::zero(), |s, &v| s + v * v).sqrt().max(T::of(1e-12));
            norms.push(n);
            row.iter_mut().for_each(|v| *v = *v / n);
        }
        let rg = self.rg(x);
        self.push(out, Op::L2NormalizeRows { x, norms }, rg)
    }

    /// Per-row dot product of two equally shaped 2-d arrays, giving `[rows]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "row_dot")?;
        let (r, c) = self.need_2d(a, "row_dot")?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out = (0..r)
            .map(|i| {
                av[i * c..(i + 1) * c].iter().zip(&bv[i * c..(i + 1) * c]).fold(T::zero(), |s, (&x, &y)| s + x * y)
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[r], out)?, Op::RowDot { a, b }, rg))
    }

    /// Mean over rows of `-log softmax(logits_row)[target_row]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.need_2d(logits, "softmax_cross_entropy")?;
        if targets.len() != r {
            return Err(Error::Shape(format!("softmax_cross_entropy: {} targets for {r} rows", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index(format!("softmax_cross_entropy: target {t} >= {c} columns")));
        }
        let lv = self.value(logits).data();
        let mut probs = lv.to_vec();
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = &lv[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().fold(T::zero(), |s, &v| s + (v - max).exp()).ln();
            total = total + (lse - row[t]);
            softmax_in_place(&mut probs[i * c..(i + 1) * c]);
        }
        let loss = total / T::of(r.max(1) as f64);
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec(), probs }, rg))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 labels, with
    /// log arguments floored at `floor`.
    pub fn sigmoid_bce(&mut self, logits: Var, labels: &[T], floor: T) -> Result<Var> {
        let n = self.value(logits).len();
        if labels.len() != n {
            return Err(Error::Shape(format!("sigmoid_bce: {} labels for {n} logits", labels.len())));
        }
        if let Some(y) = labels.iter().find(|&&y| y != T::zero() && y != T::one()) {
            return Err(Error::Label(format!("label {y:?} is not 0 or 1")));
        }
        let lv = self.value(logits).data();
        let mut total = T::zero();
        for (&z, &y) in lv.iter().zip(labels) {
            let c = sigmoid(z);
            total = total - (y * c.max(floor).ln() + (T::one() - y) * (T::one() - c).max(floor).ln());
        }
        let loss = total / T::of(n.max(1) as f64);
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::SigmoidBce { logits, labels: labels.to_vec(), floor }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |s, &v| s + v);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().fold(T::zero(), |s, &v| s + v) / T::of(x.len().max(1) as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean { a }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape { a }, rg))
    }
}
