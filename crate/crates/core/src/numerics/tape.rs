use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

use super::kernels::{gemm_nn, gemm_tn, transpose};
use super::{Scalar, Tensor, MASK_VALUE};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    tape: u64,
}

enum Op<F> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, F),
    Sum(usize),
    MatMul(usize, usize),
    BatchMatMul {
        a: usize,
        b: usize,
        transpose_b: bool,
    },
    Transpose(usize),
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Relu(usize),
    Gelu(usize),
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Dropout {
        x: usize,
        mask: Vec<F>,
    },
    SplitHeads {
        x: usize,
        batch: usize,
        heads: usize,
    },
    MergeHeads {
        x: usize,
        batch: usize,
        heads: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<i64>,
        ignore_index: i64,
        probs: Vec<F>,
        count: usize,
    },
    Spent,
}

struct Node<F> {
    value: Arc<Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records forward operations and replays them backwards once.
///
/// Node creation order is a topological order, so backward walks the node
/// list in reverse and visits each node exactly once.
pub struct Tape<F: Scalar = f32> {
    id: u64,
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    consumed: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Arc<Tensor<F>>) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push_unchecked(Arc::new(value), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        assert_eq!(v.tape, self.id, "variable from a different tape");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Gradient accumulated into a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        if v.tape != self.id {
            return None;
        }
        let shape = self.nodes[v.index].value.shape().to_vec();
        self.grads[v.index]
            .as_ref()
            .map(|g| Tensor::from_parts(shape, g.clone()))
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        Ok(v.index)
    }

    fn push_unchecked(&mut self, value: Arc<Tensor<F>>, op: Op<F>, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var {
            index,
            tape: self.id,
        }
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor<F>,
        op: Op<F>,
        inputs: &[usize],
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push_unchecked(Arc::new(value), op, requires_grad))
    }

    fn val(&self, i: usize) -> &Tensor<F> {
        &self.nodes[i].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push("add", out, Op::Add(ia, ib), &[ia, ib])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push("mul", out, Op::Mul(ia, ib), &[ia, ib])
    }

    pub fn scale(&mut self, a: Var, s: F) -> Result<Var> {
        let ia = self.check(a)?;
        let ta = self.val(ia);
        let out = Tensor::from_parts(ta.shape().to_vec(), ta.data().iter().map(|&x| x * s).collect());
        self.push("scale", out, Op::Scale(ia, s), &[ia])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let total = self.val(ia).data().iter().fold(F::zero(), |acc, &x| acc + x);
        self.push("sum", Tensor::scalar(total), Op::Sum(ia), &[ia])
    }

    /// `[m×k] · [k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut c = vec![F::zero(); m * n];
        gemm_nn(m, k, n, ta.data(), tb.data(), &mut c);
        self.push("matmul", Tensor::from_parts(vec![m, n], c), Op::MatMul(ia, ib), &[ia, ib])
    }

    /// Batched product `[b×m×k] · [b×k×n]`, or `[b×m×k] · [b×n×k]ᵀ` when
    /// `transpose_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        let bad = || Error::shape("batch_matmul", ta.shape(), tb.shape());
        if ta.rank() != 3 || tb.rank() != 3 || ta.shape()[0] != tb.shape()[0] {
            return Err(bad());
        }
        let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (kb, n) = if transpose_b {
            (tb.shape()[2], tb.shape()[1])
        } else {
            (tb.shape()[1], tb.shape()[2])
        };
        if kb != k {
            return Err(bad());
        }
        let mut c = vec![F::zero(); bs * m * n];
        for s in 0..bs {
            let a_s = &ta.data()[s * m * k..(s + 1) * m * k];
            let b_s = &tb.data()[s * k * n..(s + 1) * k * n];
            let c_s = &mut c[s * m * n..(s + 1) * m * n];
            if transpose_b {
                let bt = transpose(n, k, b_s);
                gemm_nn(m, k, n, a_s, &bt, c_s);
            } else {
                gemm_nn(m, k, n, a_s, b_s, c_s);
            }
        }
        let op = Op::BatchMatMul {
            a: ia,
            b: ib,
            transpose_b,
        };
        self.push("batch_matmul", Tensor::from_parts(vec![bs, m, n], c), op, &[ia, ib])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let ta = self.val(ia);
        if ta.rank() != 2 {
            return Err(Error::shape("transpose", ta.shape(), &[2]));
        }
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let out = Tensor::from_parts(vec![c, r], transpose(r, c, ta.data()));
        self.push("transpose", out, Op::Transpose(ia), &[ia])
    }

    /// `x[n×i] · w[i×o] + b[o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (ix, iw, ib) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let (tx, tw, tb) = (self.val(ix), self.val(iw), self.val(ib));
        if tx.rank() != 2 || tw.rank() != 2 || tx.shape()[1] != tw.shape()[0] {
            return Err(Error::shape("linear", tx.shape(), tw.shape()));
        }
        let (n, i, o) = (tx.shape()[0], tx.shape()[1], tw.shape()[1]);
        if tb.numel() != o {
            return Err(Error::shape("linear bias", tw.shape(), tb.shape()));
        }
        let mut c = Vec::with_capacity(n * o);
        for _ in 0..n {
            c.extend_from_slice(tb.data());
        }
        gemm_nn(n, i, o, tx.data(), tw.data(), &mut c);
        let op = Op::Linear { x: ix, w: iw, b: ib };
        self.push("linear", Tensor::from_parts(vec![n, o], c), op, &[ix, iw, ib])
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let tx = self.val(ix);
        if axis >= tx.rank() {
            return Err(Error::Invalid(format!(
                "softmax axis {axis} out of range for shape {:?}",
                tx.shape()
            )));
        }
        let out = softmax_along(tx, axis);
        self.push("softmax", out, Op::Softmax { x: ix, axis }, &[ix])
    }

    /// Softmax over the last axis of `scores + mask`. Mask entries are 0 or
    /// [`MASK_VALUE`]; a row with every entry masked is an error.
    pub fn masked_softmax(&mut self, scores: Var, mask: &Tensor<F>) -> Result<Var> {
        let is = self.check(scores)?;
        let ts = self.val(is);
        if ts.shape() != mask.shape() {
            return Err(Error::shape("masked_softmax", ts.shape(), mask.shape()));
        }
        let n = ts.last_dim();
        let half = F::lit(MASK_VALUE / 2.0);
        for (r, row) in mask.data().chunks(n).enumerate() {
            if row.iter().all(|&m| m <= half) {
                return Err(Error::FullyMasked(r));
            }
        }
        let data = ts.data().iter().zip(mask.data()).map(|(&s, &m)| s + m).collect();
        let shifted = Tensor::from_parts(ts.shape().to_vec(), data);
        let axis = shifted.rank() - 1;
        let out = softmax_along(&shifted, axis);
        self.push("masked_softmax", out, Op::Softmax { x: is, axis }, &[is])
    }

    /// Layer normalisation over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        let (tx, tg, tb) = (self.val(ix), self.val(ig), self.val(ib));
        let d = tx.last_dim();
        if tg.numel() != d || tb.numel() != d {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.numel() / d;
        let eps = F::lit(LAYER_NORM_EPS);
        let inv_d = F::one() / F::lit(d as f64);
        let mut out = Vec::with_capacity(tx.numel());
        let mut xhat = Vec::with_capacity(tx.numel());
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().fold(F::zero(), |a, &v| a + v) * inv_d;
            let var = row.iter().fold(F::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
            let rs = F::one() / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat.push(h);
                out.push(h * tg.data()[j] + tb.data()[j]);
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        let op = Op::LayerNorm {
            x: ix,
            gain: ig,
            bias: ib,
            xhat,
            rstd,
        };
        self.push("layer_norm", out, op, &[ix, ig, ib])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let tx = self.val(ix);
        let data = tx.data().iter().map(|&v| if v > F::zero() { v } else { F::zero() }).collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push("relu", out, Op::Relu(ix), &[ix])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let tx = self.val(ix);
        let data = tx.data().iter().map(|&v| gelu_value(v)).collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push("gelu", out, Op::Gelu(ix), &[ix])
    }

    /// Gathers rows of `table[V×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.check(table)?;
        let tt = self.val(it);
        if tt.rank() != 2 {
            return Err(Error::shape("embedding", tt.shape(), &[2]));
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        if ids.is_empty() {
            return Err(Error::Invalid("embedding lookup of an empty sequence".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Invalid(format!("token id {id} outside table of {v} rows")));
            }
            data.extend_from_slice(tt.row(id));
        }
        let out = Tensor::from_parts(vec![ids.len(), d], data);
        let op = Op::Embedding {
            table: it,
            ids: ids.to_vec(),
        };
        self.push("embedding", out, op, &[it])
    }

    /// Inverted dropout. Only call while training.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        let ix = self.check(x)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = F::lit(1.0 / (1.0 - rate));
        let tx = self.val(ix);
        let mask: Vec<F> = (0..tx.numel())
            .map(|_| if rng.random::<f64>() < rate { F::zero() } else { keep })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push("dropout", out, Op::Dropout { x: ix, mask }, &[ix])
    }

    /// `[(batch·T)×(heads·dk)] -> [(batch·heads)×T×dk]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let tx = self.val(ix);
        let (rows, d) = head_dims(tx, batch, heads, "split_heads")?;
        let t = rows / batch;
        let out = Tensor::from_parts(vec![batch * heads, t, d / heads], permute_heads(tx.data(), batch, t, heads, d / heads, true));
        self.push("split_heads", out, Op::SplitHeads { x: ix, batch, heads }, &[ix])
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let tx = self.val(ix);
        if tx.rank() != 3 || tx.shape()[0] != batch * heads {
            return Err(Error::shape("merge_heads", tx.shape(), &[batch, heads]));
        }
        let (t, dk) = (tx.shape()[1], tx.shape()[2]);
        let out = Tensor::from_parts(vec![batch * t, heads * dk], permute_heads(tx.data(), batch, t, heads, dk, false));
        self.push("merge_heads", out, Op::MergeHeads { x: ix, batch, heads }, &[ix])
    }

    /// Mean negative log-likelihood over rows whose label is not
    /// `ignore_index`. Ignored rows contribute neither loss nor gradient.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[i64], ignore_index: i64) -> Result<Var> {
        let il = self.check(logits)?;
        let tl = self.val(il);
        if tl.rank() != 2 || tl.shape()[0] != labels.len() {
            return Err(Error::shape("cross_entropy", tl.shape(), &[labels.len()]));
        }
        let v = tl.shape()[1];
        let mut probs = vec![F::zero(); tl.numel()];
        let mut total = F::zero();
        let mut count = 0usize;
        for (r, &label) in labels.iter().enumerate() {
            if label == ignore_index {
                continue;
            }
            if label < 0 || label as usize >= v {
                return Err(Error::LabelOutOfRange { label, vocab_size: v });
            }
            let row = tl.row(r);
            let max = row.iter().fold(F::neg_infinity(), |a, &x| a.max(x));
            let mut z = F::zero();
            for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - max).exp();
                z = z + *p;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p = *p / z;
            }
            total = total + (max + z.ln() - row[label as usize]);
            count += 1;
        }
        if count == 0 {
            return Err(Error::NoSupervisedPositions);
        }
        let loss = total / F::lit(count as f64);
        let op = Op::CrossEntropy {
            logits: il,
            labels: labels.to_vec(),
            ignore_index,
            probs,
            count,
        };
        self.push("cross_entropy", Tensor::scalar(loss), op, &[il])
    }

    /// Back-propagates from a scalar root. The tape can be replayed only once.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let r = self.check(root)?;
        if self.nodes[r].value.numel() != 1 {
            return Err(Error::Invalid(format!(
                "backward root must be a scalar, got shape {:?}",
                self.nodes[r].value.shape()
            )));
        }
        self.consumed = true;
        self.grads[r] = Some(vec![F::one()]);
        for i in (0..=r).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Spent);
            if matches!(op, Op::Leaf) {
                self.nodes[i].op = Op::Leaf;
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop(i, op, g);
        }
        Ok(())
    }

    fn accumulate(&mut self, i: usize, contribution: Vec<F>) {
        if !self.nodes[i].requires_grad {
            return;
        }
        match &mut self.grads[i] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contribution) {
                    *a = *a + b;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn backprop(&mut self, i: usize, op: Op<F>, g: Vec<F>) {
        match op {
            Op::Leaf | Op::Spent => {}
            Op::Add(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g);
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    let d = g.iter().zip(self.val(b).data()).map(|(&g, &y)| g * y).collect();
                    self.accumulate(a, d);
                }
                if self.wants(b) {
                    let d = g.iter().zip(self.val(a).data()).map(|(&g, &x)| g * x).collect();
                    self.accumulate(b, d);
                }
            }
            Op::Scale(a, s) => {
                self.accumulate(a, g.into_iter().map(|v| v * s).collect());
            }
            Op::Sum(a) => {
                let n = self.val(a).numel();
                self.accumulate(a, vec![g[0]; n]);
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.val(a).shape()[0], self.val(a).shape()[1]);
                let n = self.val(b).shape()[1];
                if self.wants(a) {
                    let bt = transpose(k, n, self.val(b).data());
                    let mut da = vec![F::zero(); m * k];
                    gemm_nn(m, n, k, &g, &bt, &mut da);
                    self.accumulate(a, da);
                }
                if self.wants(b) {
                    let mut db = vec![F::zero(); k * n];
                    gemm_tn(k, m, n, self.val(a).data(), &g, &mut db);
                    self.accumulate(b, db);
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (bs, m, k) = (self.val(a).shape()[0], self.val(a).shape()[1], self.val(a).shape()[2]);
                let n = self.nodes[i].value.shape()[2];
                if self.wants(a) {
                    let mut da = vec![F::zero(); bs * m * k];
                    for s in 0..bs {
                        let g_s = &g[s * m * n..(s + 1) * m * n];
                        let b_s = &self.val(b).data()[s * k * n..(s + 1) * k * n];
                        let da_s = &mut da[s * m * k..(s + 1) * m * k];
                        if transpose_b {
                            gemm_nn(m, n, k, g_s, b_s, da_s);
                        } else {
                            let bt = transpose(k, n, b_s);
                            gemm_nn(m, n, k, g_s, &bt, da_s);
                        }
                    }
                    self.accumulate(a, da);
                }
                if self.wants(b) {
                    let mut db = vec![F::zero(); bs * k * n];
                    for s in 0..bs {
                        let g_s = &g[s * m * n..(s + 1) * m * n];
                        let a_s = &self.val(a).data()[s * m * k..(s + 1) * m * k];
                        let db_s = &mut db[s * k * n..(s + 1) * k * n];
                        if transpose_b {
                            gemm_tn(n, m, k, g_s, a_s, db_s);
                        } else {
                            gemm_tn(k, m, n, a_s, g_s, db_s);
                        }
                    }
                    self.accumulate(b, db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.val(a).shape()[0], self.val(a).shape()[1]);
                self.accumulate(a, transpose(c, r, &g));
            }
            Op::Linear { x, w, b } => {
                let (n, inp) = (self.val(x).shape()[0], self.val(x).shape()[1]);
                let out = self.val(w).shape()[1];
                if self.wants(x) {
                    let wt = transpose(inp, out, self.val(w).data());
                    let mut dx = vec![F::zero(); n * inp];
                    gemm_nn(n, out, inp, &g, &wt, &mut dx);
                    self.accumulate(x, dx);
                }
                if self.wants(w) {
                    let mut dw = vec![F::zero(); inp * out];
                    gemm_tn(inp, n, out, self.val(x).data(), &g, &mut dw);
                    self.accumulate(w, dw);
                }
                if self.wants(b) {
                    let mut db = vec![F::zero(); out];
                    for row in g.chunks(out) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    self.accumulate(b, db);
                }
            }
            Op::Softmax { x, axis } => {
                let y = self.nodes[i].value.clone();
                let (outer, len, inner) = axis_layout(y.shape(), axis);
                let yd = y.data();
                let mut dx = vec![F::zero(); yd.len()];
                for o in 0..outer {
                    for inn in 0..inner {
                        let idx = |t: usize| (o * len + t) * inner + inn;
                        let mut dot = F::zero();
                        for t in 0..len {
                            dot = dot + yd[idx(t)] * g[idx(t)];
                        }
                        for t in 0..len {
                            dx[idx(t)] = yd[idx(t)] * (g[idx(t)] - dot);
                        }
                    }
                }
                self.accumulate(x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.val(gain).numel();
                let gv = self.val(gain).data().to_vec();
                let inv_d = F::one() / F::lit(d as f64);
                let rows = g.len() / d;
                if self.wants(x) {
                    let mut dx = vec![F::zero(); g.len()];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = F::zero();
                        let mut mean_dh_h = F::zero();
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * hr[j];
                        }
                        mean_dh = mean_dh * inv_d;
                        mean_dh_h = mean_dh_h * inv_d;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            dx[r * d + j] = rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    self.accumulate(x, dx);
                }
                if self.wants(gain) {
                    let mut dg = vec![F::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] = dg[j] + g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    self.accumulate(gain, dg);
                }
                if self.wants(bias) {
                    let mut db = vec![F::zero(); d];
                    for row in g.chunks(d) {
                        for (a, &v) in db.iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                    self.accumulate(bias, db);
                }
            }
            Op::Relu(x) => {
                let d = g
                    .iter()
                    .zip(self.val(x).data())
                    .map(|(&g, &v)| if v > F::zero() { g } else { F::zero() })
                    .collect();
                self.accumulate(x, d);
            }
            Op::Gelu(x) => {
                let d = g
                    .iter()
                    .zip(self.val(x).data())
                    .map(|(&g, &v)| g * gelu_derivative(v))
                    .collect();
                self.accumulate(x, d);
            }
            Op::Embedding { table, ids } => {
                let shape = self.val(table).shape().to_vec();
                let d = shape[1];
                let mut dt = vec![F::zero(); shape[0] * d];
                for (pos, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] = dt[id * d + j] + g[pos * d + j];
                    }
                }
                self.accumulate(table, dt);
            }
            Op::Dropout { x, mask } => {
                self.accumulate(x, g.iter().zip(&mask).map(|(&g, &m)| g * m).collect());
            }
            Op::SplitHeads { x, batch, heads } => {
                let s = self.nodes[i].value.shape().to_vec();
                let d = permute_heads(&g, batch, s[1], heads, s[2], false);
                self.accumulate(x, d);
            }
            Op::MergeHeads { x, batch, heads } => {
                let s = self.val(x).shape().to_vec();
                let d = permute_heads(&g, batch, s[1], heads, s[2], true);
                self.accumulate(x, d);
            }
            Op::CrossEntropy {
                logits,
                labels,
                ignore_index,
                probs,
                count,
            } => {
                let v = self.val(logits).shape()[1];
                let scale = g[0] / F::lit(count as f64);
                let mut d = vec![F::zero(); probs.len()];
                for (r, &label) in labels.iter().enumerate() {
                    if label == ignore_index {
                        continue;
                    }
                    for j in 0..v {
                        let onehot = if j == label as usize { F::one() } else { F::zero() };
                        d[r * v + j] = scale * (probs[r * v + j] - onehot);
                    }
                }
                self.accumulate(logits, d);
            }
        }
    }
}

fn head_dims<F: Scalar>(t: &Tensor<F>, batch: usize, heads: usize, op: &'static str) -> Result<(usize, usize)> {
    if t.rank() != 2 || batch == 0 || heads == 0 {
        return Err(Error::shape(op, t.shape(), &[batch, heads]));
    }
    let (rows, d) = (t.shape()[0], t.shape()[1]);
    if rows % batch != 0 || d % heads != 0 {
        return Err(Error::shape(op, t.shape(), &[batch, heads]));
    }
    Ok((rows, d))
}

/// Moves between `[b, t, h, dk]` (`split = true` reads this layout) and
/// `[b, h, t, dk]`.
fn permute_heads<F: Scalar>(src: &[F], batch: usize, t: usize, heads: usize, dk: usize, split: bool) -> Vec<F> {
    let mut out = vec![F::zero(); src.len()];
    for b in 0..batch {
        for tt in 0..t {
            for h in 0..heads {
                let merged = ((b * t + tt) * heads + h) * dk;
                let split_at = ((b * heads + h) * t + tt) * dk;
                let (from, to) = if split { (merged, split_at) } else { (split_at, merged) };
                out[to..to + dk].copy_from_slice(&src[from..from + dk]);
            }
        }
    }
    out
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_along<F: Scalar>(x: &Tensor<F>, axis: usize) -> Tensor<F> {
    let (outer, len, inner) = axis_layout(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![F::zero(); xd.len()];
    for o in 0..outer {
        for inn in 0..inner {
            let idx = |t: usize| (o * len + t) * inner + inn;
            let mut max = F::neg_infinity();
            for t in 0..len {
                max = max.max(xd[idx(t)]);
            }
            let mut z = F::zero();
            for t in 0..len {
                let e = (xd[idx(t)] - max).exp();
                out[idx(t)] = e;
                z = z + e;
            }
            for t in 0..len {
                out[idx(t)] = out[idx(t)] / z;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu_value<F: Scalar>(x: F) -> F {
    let u = F::lit(GELU_C) * (x + F::lit(GELU_A) * x * x * x);
    F::lit(0.5) * x * (F::one() + u.tanh())
}

fn gelu_derivative<F: Scalar>(x: F) -> F {
    let u = F::lit(GELU_C) * (x + F::lit(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = F::lit(GELU_C) * (F::one() + F::lit(3.0 * GELU_A) * x * x);
    F::lit(0.5) * (F::one() + t) + F::lit(0.5) * x * (F::one() - t * t) * du
}
