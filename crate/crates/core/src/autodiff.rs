//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node whose parents already exist, so node
//! indices are a topological order and a single reverse sweep visits each
//! node once. A tape is single-writer; independent tapes share nothing.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{LensError, Result};
use crate::tensor::{softmax_into, Real, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// `0.5 * (1 + tanh(u))` written as a logistic, which needs one `exp`.
#[inline]
fn half_one_plus_tanh<T: Real>(u: T) -> T {
    T::one() / (T::one() + (T::of(-2.0) * u).exp())
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Query and key row ranges of one sequence inside a batched attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    Attention(AttentionSaved<T>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct AttentionSaved<T> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    scale: T,
    segments: Vec<Segment>,
    pruned: Vec<bool>,
    /// Attention probabilities; segment `s`, head `h` starts at
    /// `offsets[s] + h * q_len * k_len`.
    probs: Vec<T>,
    offsets: Vec<usize>,
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients indexed by [`Var`]; `None` for nodes that do not require grad.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> LensError {
    LensError::Shape(format!("{what}: {a:?} vs {b:?}"))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        if av.shape().len() != 2 || bv.shape().len() != 2 || bv.rows() != k {
            return Err(shape_err("matmul inner extents differ", av.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, av.data(), false, bv.data(), false, T::zero(), &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(av.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds the vector `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.cols();
        if bv.len() != n {
            return Err(shape_err("row bias", xv.shape(), bv.shape()));
        }
        let b = bv.data();
        let data = xv
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let value = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::of(GELU_C);
        let a = T::of(0.044_715);
        let value = self
            .value(x)
            .map(|v| v * half_one_plus_tanh(c * (v + a * v * v * v)));
        let rg = self.rg(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(shape_err("layer norm parameters", xv.shape(), self.value(gain).shape()));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let eps = T::of(LAYER_NORM_EPS);
        let nf = T::of(n as f64);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    /// Row-wise softmax of a matrix (or of a vector). Entries where `mask`
    /// is false get exactly zero probability.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(LensError::Contract("softmax of an empty tensor".into()));
        }
        if xv.data().iter().any(|v| v.is_nan()) {
            return Err(LensError::Numeric("NaN in softmax input".into()));
        }
        if let Some(m) = mask {
            if m.len() != xv.len() {
                return Err(LensError::Shape(format!(
                    "softmax mask of length {} for {:?}",
                    m.len(),
                    xv.shape()
                )));
            }
        }
        let n = xv.cols();
        let mut out = vec![T::zero(); xv.len()];
        for (r, (row, o)) in xv.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
            softmax_into(row, mask.map(|m| &m[r * n..(r + 1) * n]), o);
        }
        let value = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Selects rows of `table` (embedding lookup when `table` is a parameter).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, n) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= rows {
                return Err(LensError::Shape(format!("row {id} out of {rows}")));
            }
            out.extend_from_slice(tv.row(id));
        }
        let value = Tensor::matrix(ids.len(), n, out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(value, Op::Gather { table, ids: ids.to_vec() }, rg))
    }

    /// Concatenates along the last axis. Vectors concatenate into a vector.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| LensError::Contract("concat of nothing".into()))?;
        let rows = self.value(*first).rows();
        let vector = self.value(*first).shape().len() == 1;
        let mut total = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.rows() != rows || (pv.shape().len() == 1) != vector {
                return Err(shape_err("concat rows", self.value(*first).shape(), pv.shape()));
            }
            total += pv.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let value = if vector {
            Tensor::new(&[total], out)?
        } else {
            Tensor::matrix(rows, total, out)?
        };
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Batched multi-head scaled dot-product attention.
    ///
    /// `q` is `Nq x d`, `k` and `v` are `Nk x d`; head `h` owns columns
    /// `h*d/heads .. (h+1)*d/heads`. Each segment attends only within its
    /// own key range. A pruned head uses the uniform map `1/k_len`. The
    /// output is `Nq x d` with head outputs laid side by side.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: T,
        segments: &[Segment],
        pruned: &[bool],
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows() {
            return Err(shape_err("attention operands", qv.shape(), kv.shape()));
        }
        if heads == 0 || d % heads != 0 || pruned.len() != heads {
            return Err(LensError::Config(format!("{heads} heads for width {d}")));
        }
        let dh = d / heads;
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut out = vec![T::zero(); qv.rows() * d];
        let mut offsets = Vec::with_capacity(segments.len());
        let total: usize = segments.iter().map(|s| s.q_len * s.k_len * heads).sum();
        let mut probs = Vec::with_capacity(total);
        for s in segments {
            if s.q_len == 0 || s.k_len == 0 {
                return Err(LensError::Contract("attention over an empty sequence".into()));
            }
            if s.q_start + s.q_len > qv.rows() || s.k_start + s.k_len > kv.rows() {
                return Err(LensError::Shape(format!("segment {s:?} outside operands")));
            }
            offsets.push(probs.len());
            let mut scores = vec![T::zero(); s.k_len];
            let mut row = vec![T::zero(); s.k_len];
            for (h, &is_pruned) in pruned.iter().enumerate() {
                let c0 = h * dh;
                for i in 0..s.q_len {
                    let qi = &qd[(s.q_start + i) * d + c0..(s.q_start + i) * d + c0 + dh];
                    if is_pruned {
                        row.fill(T::one() / T::of(s.k_len as f64));
                    } else {
                        for (j, sc) in scores.iter_mut().enumerate() {
                            let kj = &kd[(s.k_start + j) * d + c0..(s.k_start + j) * d + c0 + dh];
                            *sc = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                        }
                        softmax_into(&scores, None, &mut row);
                    }
                    let o = &mut out[(s.q_start + i) * d + c0..(s.q_start + i) * d + c0 + dh];
                    for (j, &p) in row.iter().enumerate() {
                        let vj = &vd[(s.k_start + j) * d + c0..(s.k_start + j) * d + c0 + dh];
                        for (oc, &vc) in o.iter_mut().zip(vj) {
                            *oc = *oc + p * vc;
                        }
                    }
                    probs.extend_from_slice(&row);
                }
            }
        }
        let value = Tensor::matrix(qv.rows(), d, out)?;
        let rg = self.rg(&[q, k, v]);
        let saved = AttentionSaved {
            q,
            k,
            v,
            heads,
            scale,
            segments: segments.to_vec(),
            pruned: pruned.to_vec(),
            probs,
            offsets,
        };
        Ok(self.push(value, Op::Attention(saved), rg))
    }

    /// Attention map (`q_len x k_len`, row-major) of one head in one segment
    /// of an attention node, or `None` if `var` is not an attention node.
    pub fn attention_map(&self, var: Var, segment: usize, head: usize) -> Option<(usize, usize, &[T])> {
        match &self.nodes[var.0].op {
            Op::Attention(a) => {
                let s = a.segments.get(segment)?;
                if head >= a.heads {
                    return None;
                }
                let size = s.q_len * s.k_len;
                let start = a.offsets[segment] + head * size;
                Some((s.q_len, s.k_len, &a.probs[start..start + size]))
            }
            _ => None,
        }
    }

    /// Mean cross-entropy of row-wise softmax(logits) against class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, c) = (lv.rows(), lv.cols());
        if targets.len() != b || targets.iter().any(|&t| t >= c) {
            return Err(LensError::Shape(format!(
                "{} targets for logits {:?}",
                targets.len(),
                lv.shape()
            )));
        }
        let mut probs = vec![T::zero(); b * c];
        let mut loss = T::zero();
        for (r, (row, p)) in lv.data().chunks(c).zip(probs.chunks_mut(c)).enumerate() {
            softmax_into(row, None, p);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            loss = loss + (lse - row[targets[r]]);
        }
        loss = loss / T::of(b as f64);
        let rg = self.rg(&[logits]);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Reverse sweep from a scalar `loss`. Every node that requires grad
    /// receives d loss / d node; contributions from fan-out add up.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(LensError::Contract(format!(
                "backward from non-scalar {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], var: Var, delta: Tensor<T>) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(g) => g.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.requires_grad(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, gd, false, bv.data(), true, T::zero(), &mut da);
                    self.accumulate(grads, *a, Tensor::matrix(m, k, da).expect("shape"));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, av.data(), true, gd, false, T::zero(), &mut db);
                    self.accumulate(grads, *b, Tensor::matrix(k, n, db).expect("shape"));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = gd.iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                let db = gd.iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                self.accumulate(grads, *a, Tensor::new(av.shape(), da).expect("shape"));
                self.accumulate(grads, *b, Tensor::new(bv.shape(), db).expect("shape"));
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.requires_grad(*bias) {
                    let bv = self.value(*bias);
                    let mut db = vec![T::zero(); bv.len()];
                    for row in gd.chunks(bv.len()) {
                        for (d, &r) in db.iter_mut().zip(row) {
                            *d = *d + r;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(bv.shape(), db).expect("shape"));
                }
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, g.map(|v| v * *c));
            }
            Op::Gelu(x) => {
                let c = T::of(GELU_C);
                let a = T::of(0.044_715);
                let two = T::of(2.0);
                let three = T::of(3.0);
                let xv = self.value(*x);
                let dx = xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| {
                        let s = half_one_plus_tanh(c * (v + a * v * v * v));
                        let du = c * (T::one() + three * a * v * v);
                        gv * (s + two * v * s * (T::one() - s) * du)
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape(), dx).expect("shape"));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let xv = self.value(*x);
                let n = xv.cols();
                let nf = T::of(n as f64);
                let gain_v = self.value(*gain).data();
                let mut dx = vec![T::zero(); xv.len()];
                let mut dg = vec![T::zero(); n];
                let mut db = vec![T::zero(); n];
                for (r, ((grow, hrow), dxrow)) in gd
                    .chunks(n)
                    .zip(xhat.chunks(n))
                    .zip(dx.chunks_mut(n))
                    .enumerate()
                {
                    let mut mean_d = T::zero();
                    let mut mean_dh = T::zero();
                    for j in 0..n {
                        let dh = grow[j] * gain_v[j];
                        mean_d = mean_d + dh;
                        mean_dh = mean_dh + dh * hrow[j];
                        dg[j] = dg[j] + grow[j] * hrow[j];
                        db[j] = db[j] + grow[j];
                    }
                    mean_d = mean_d / nf;
                    mean_dh = mean_dh / nf;
                    for j in 0..n {
                        let dh = grow[j] * gain_v[j];
                        dxrow[j] = inv_std[r] * (dh - mean_d - hrow[j] * mean_dh);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape(), dx).expect("shape"));
                let gs = self.value(*gain).shape().to_vec();
                self.accumulate(grads, *gain, Tensor::new(&gs, dg).expect("shape"));
                let bs = self.value(*bias).shape().to_vec();
                self.accumulate(grads, *bias, Tensor::new(&bs, db).expect("shape"));
            }
            Op::Softmax(x) => {
                let p = &node.value;
                let n = p.cols();
                let mut dx = vec![T::zero(); p.len()];
                for ((prow, grow), drow) in p.data().chunks(n).zip(gd.chunks(n)).zip(dx.chunks_mut(n)) {
                    let dot = prow.iter().zip(grow).map(|(&a, &b)| a * b).sum::<T>();
                    for j in 0..n {
                        drow[j] = prow[j] * (grow[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(p.shape(), dx).expect("shape"));
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let n = tv.cols();
                let mut dt = vec![T::zero(); tv.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..n {
                        dt[id * n + j] = dt[id * n + j] + gd[r * n + j];
                    }
                }
                self.accumulate(grads, *table, Tensor::new(tv.shape(), dt).expect("shape"));
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut c0 = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let w = pv.cols();
                    if self.requires_grad(*p) {
                        let mut dp = Vec::with_capacity(pv.len());
                        for r in 0..rows {
                            dp.extend_from_slice(&gd[r * total + c0..r * total + c0 + w]);
                        }
                        self.accumulate(grads, *p, Tensor::new(pv.shape(), dp).expect("shape"));
                    }
                    c0 += w;
                }
            }
            Op::Attention(a) => self.attention_backward(a, gd, grads),
            Op::CrossEntropy { logits, targets, probs } => {
                let lv = self.value(*logits);
                let c = lv.cols();
                let scale = gd[0] / T::of(targets.len() as f64);
                let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * c + t] = dl[r * c + t] - scale;
                }
                self.accumulate(grads, *logits, Tensor::new(lv.shape(), dl).expect("shape"));
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, Tensor::filled(xv.shape(), gd[0]));
            }
        }
    }

    fn attention_backward(&self, a: &AttentionSaved<T>, gd: &[T], grads: &mut [Option<Tensor<T>>]) {
        let (qv, kv, vv) = (self.value(a.q), self.value(a.k), self.value(a.v));
        let d = qv.cols();
        let dh = d / a.heads;
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut dq = vec![T::zero(); qv.len()];
        let mut dk = vec![T::zero(); kv.len()];
        let mut dv = vec![T::zero(); vv.len()];
        for (s, &off) in a.segments.iter().zip(&a.offsets) {
            let size = s.q_len * s.k_len;
            let mut dp = vec![T::zero(); s.k_len];
            for h in 0..a.heads {
                let c0 = h * dh;
                let p = &a.probs[off + h * size..off + (h + 1) * size];
                for i in 0..s.q_len {
                    let qrow = (s.q_start + i) * d + c0;
                    let go = &gd[qrow..qrow + dh];
                    let prow = &p[i * s.k_len..(i + 1) * s.k_len];
                    for j in 0..s.k_len {
                        let krow = (s.k_start + j) * d + c0;
                        let vj = &vd[krow..krow + dh];
                        dp[j] = go.iter().zip(vj).map(|(&x, &y)| x * y).sum();
                        let pj = prow[j];
                        for (dvc, &gc) in dv[krow..krow + dh].iter_mut().zip(go) {
                            *dvc = *dvc + pj * gc;
                        }
                    }
                    if a.pruned[h] {
                        continue;
                    }
                    let dot = prow.iter().zip(&dp).map(|(&x, &y)| x * y).sum::<T>();
                    let qi = &qd[qrow..qrow + dh];
                    let dqi = &mut dq[qrow..qrow + dh];
                    for j in 0..s.k_len {
                        let ds = prow[j] * (dp[j] - dot) * a.scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let krow = (s.k_start + j) * d + c0;
                        for (dqc, &kc) in dqi.iter_mut().zip(&kd[krow..krow + dh]) {
                            *dqc = *dqc + ds * kc;
                        }
                        for (dkc, &qc) in dk[krow..krow + dh].iter_mut().zip(qi) {
                            *dkc = *dkc + ds * qc;
                        }
                    }
                }
            }
        }
        let (qs, ks, vs) = (qv.shape().to_vec(), kv.shape().to_vec(), vv.shape().to_vec());
        self.accumulate(grads, a.q, Tensor::new(&qs, dq).expect("shape"));
        self.accumulate(grads, a.k, Tensor::new(&ks, dk).expect("shape"));
        self.accumulate(grads, a.v, Tensor::new(&vs, dv).expect("shape"));
    }
}
