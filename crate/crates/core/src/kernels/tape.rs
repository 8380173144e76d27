//! Replayable gradient tape.
//!
//! Every differentiable kernel pushes one record holding its output and
//! whatever it needs for its hand-derived backward pass. [`Tape::backward`]
//! walks the records in strict reverse order. Records whose inputs carry no
//! trainable leaf are never replayed, which is how a frozen subgraph (for
//! instance the whole encoder) skips its backward pass.

use super::attention::{attend, AttnMask};
use super::ops::{self, norm_stats, sigmoid_scalar};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batched attention geometry: `batch` sequences of `lq` queries over `lk` keys.
#[derive(Clone, Debug)]
pub struct AttnLayout {
    pub batch: usize,
    pub lq: usize,
    pub lk: usize,
    pub heads: usize,
    /// One mask per sequence.
    pub masks: Vec<AttnMask>,
}

/// `batch` sequences of `len` rows each, laid out back to back.
#[derive(Clone, Debug)]
pub struct SeqLayout {
    pub batch: usize,
    pub len: usize,
    /// Valid (unpadded) length of each sequence.
    pub lengths: Vec<usize>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    OneMinus(Var),
    Relu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: T,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        probs: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<u32>,
    },
    ConcatCols(Vec<Var>),
    GatedScan {
        forget: Var,
        input: Var,
        batch: usize,
        len: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    SmoothedCe {
        logits: Var,
        targets: Vec<u32>,
        smoothing: T,
        normalizer: T,
        probs: Vec<T>,
    },
    BceLogits {
        logits: Var,
        targets: Tensor<T>,
        normalizer: T,
    },
    WeightedSum(Vec<(Var, T)>),
    SumAll(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records forward kernels and replays their gradients in reverse.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_ops: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn scalar<T: Scalar>(v: T) -> Tensor<T> {
    Tensor::from_parts(vec![1], vec![v])
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_ops: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Leaf value; gradients are accumulated for it iff `trainable`.
    pub fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of the last [`Tape::backward`] target w.r.t. a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Number of records whose backward pass has been executed.
    pub fn backward_ops(&self) -> usize {
        self.backward_ops
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), g))
    }

    /// `a x b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul_nt(self.value(a), self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMulNt(a, b), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), g))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = ops::add_bias(self.value(x), self.value(bias))?;
        let g = self.any_grad(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), g))
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Dimension {
                op: "mul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), g))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        let g = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, s), g)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() - v);
        let g = self.any_grad(&[x]);
        self.push(out, Op::OneMinus(x), g)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        let g = self.any_grad(&[x]);
        self.push(out, Op::Relu(x), g)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = ops::sigmoid(self.value(x));
        let g = self.any_grad(&[x]);
        self.push(out, Op::Sigmoid(x), g)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let out = ops::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        let g = self.any_grad(&[x, gain, bias]);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, eps }, g))
    }

    /// Batched scaled dot-product attention over already projected `q`, `k`, `v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttnLayout) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let d = vq.cols();
        let AttnLayout {
            batch,
            lq,
            lk,
            heads,
            ..
        } = layout;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model dimension {d} is not divisible by {heads} heads"
            )));
        }
        if vq.rows() != batch * lq
            || vk.rows() != batch * lk
            || vv.rows() != batch * lk
            || vk.cols() != d
            || vv.cols() != d
            || layout.masks.len() != batch
        {
            return Err(Error::Dimension {
                op: "attention",
                lhs: vq.shape().to_vec(),
                rhs: vk.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); batch * lq * d];
        let mut probs = vec![T::zero(); batch * heads * lq * lk];
        for b in 0..batch {
            attend(
                &vq.data()[b * lq * d..(b + 1) * lq * d],
                &vk.data()[b * lk * d..(b + 1) * lk * d],
                &vv.data()[b * lk * d..(b + 1) * lk * d],
                lq,
                lk,
                d,
                heads,
                layout.masks[b],
                &mut out[b * lq * d..(b + 1) * lq * d],
                &mut probs[b * heads * lq * lk..(b + 1) * heads * lq * lk],
            );
        }
        let g = self.any_grad(&[q, k, v]);
        if !g {
            probs = Vec::new();
        }
        let out = Tensor::from_parts(vec![batch * lq, d], out);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            g,
        ))
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let t = self.value(table);
        let d = t.cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= t.rows() {
                return Err(Error::Input(format!(
                    "id {id} outside embedding table of {} rows",
                    t.rows()
                )));
            }
            data.extend_from_slice(t.row(id as usize));
        }
        if ids.is_empty() {
            return Err(Error::Input("empty id sequence".into()));
        }
        let out = Tensor::from_parts(vec![ids.len(), d], data);
        let g = self.any_grad(&[table]);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            g,
        ))
    }

    /// Column-wise concatenation of 2-D values with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::Dimension {
                op: "concat_cols",
                lhs: self.value(parts[0]).shape().to_vec(),
                rhs: parts.iter().map(|&p| self.value(p).rows()).collect(),
            });
        }
        let width: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::from_parts(vec![rows, width], data);
        let g = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), g))
    }

    /// Gated recurrence `c_t = f_t * c_{t-1} + (1 - f_t) * u_t` with `c_{-1} = 0`,
    /// scanned independently over each of `batch` sequences of `len` rows.
    pub fn gated_scan(&mut self, forget: Var, input: Var, batch: usize, len: usize) -> Result<Var> {
        let (f, u) = (self.value(forget), self.value(input));
        if f.shape() != u.shape() || f.rows() != batch * len {
            return Err(Error::Dimension {
                op: "gated_scan",
                lhs: f.shape().to_vec(),
                rhs: u.shape().to_vec(),
            });
        }
        let d = f.cols();
        let mut c = vec![T::zero(); batch * len * d];
        for b in 0..batch {
            let mut prev = vec![T::zero(); d];
            for t in 0..len {
                let r = (b * len + t) * d;
                for j in 0..d {
                    let ft = f.data()[r + j];
                    let v = ft * prev[j] + (T::one() - ft) * u.data()[r + j];
                    c[r + j] = v;
                    prev[j] = v;
                }
            }
        }
        let out = Tensor::from_parts(f.shape().to_vec(), c);
        let g = self.any_grad(&[forget, input]);
        Ok(self.push(
            out,
            Op::GatedScan {
                forget,
                input,
                batch,
                len,
            },
            g,
        ))
    }

    /// Max over the valid rows of each sequence: `[batch * len, d] -> [batch, d]`.
    pub fn max_pool(&mut self, x: Var, layout: &SeqLayout) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != layout.batch * layout.len || layout.lengths.len() != layout.batch {
            return Err(Error::Dimension {
                op: "max_pool",
                lhs: xv.shape().to_vec(),
                rhs: vec![layout.batch, layout.len],
            });
        }
        let d = xv.cols();
        let mut data = vec![T::zero(); layout.batch * d];
        let mut argmax = vec![0usize; layout.batch * d];
        for b in 0..layout.batch {
            let n = layout.lengths[b].clamp(1, layout.len);
            for j in 0..d {
                let mut best = b * layout.len;
                for t in 1..n {
                    let r = b * layout.len + t;
                    if xv.data()[r * d + j] > xv.data()[best * d + j] {
                        best = r;
                    }
                }
                argmax[b * d + j] = best;
                data[b * d + j] = xv.data()[best * d + j];
            }
        }
        let out = Tensor::from_parts(vec![layout.batch, d], data);
        let g = self.any_grad(&[x]);
        Ok(self.push(out, Op::MaxPool { x, argmax }, g))
    }

    /// Label-smoothed cross-entropy summed over rows whose target is not `pad`
    /// and divided by `normalizer`. The smoothed target puts `1 - smoothing` on
    /// the reference and spreads `smoothing` uniformly over the vocabulary.
    pub fn smoothed_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u32],
        pad: u32,
        smoothing: T,
        normalizer: T,
    ) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != targets.len() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let v = lv.cols();
        let uniform = smoothing / T::lit(v as f64);
        let mut probs = vec![T::zero(); lv.numel()];
        let mut total = T::zero();
        let mut masked = targets.to_vec();
        for (r, &t) in targets.iter().enumerate() {
            if t == pad {
                masked[r] = u32::MAX;
                continue;
            }
            if t as usize >= v {
                return Err(Error::Input(format!("target id {t} outside vocabulary {v}")));
            }
            let mut logp = lv.row(r).to_vec();
            ops::log_softmax_in_place(&mut logp);
            let mut row_loss = T::zero();
            for (j, &lp) in logp.iter().enumerate() {
                let mut q = uniform;
                if j == t as usize {
                    q += T::one() - smoothing;
                }
                if q != T::zero() {
                    row_loss -= q * lp;
                }
                probs[r * v + j] = lp.exp();
            }
            total += row_loss;
        }
        let g = self.any_grad(&[logits]);
        Ok(self.push(
            scalar(total / normalizer),
            Op::SmoothedCe {
                logits,
                targets: masked,
                smoothing,
                normalizer,
                probs,
            },
            g,
        ))
    }

    /// Binary cross-entropy with logits against 0/1 `targets`, summed and
    /// divided by `normalizer`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor<T>, normalizer: T) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != targets.shape() {
            return Err(Error::Dimension {
                op: "bce_with_logits",
                lhs: lv.shape().to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        let mut total = T::zero();
        for (&z, &y) in lv.data().iter().zip(targets.data()) {
            // softplus(z) - y z, written to avoid overflow
            let sp = z.max(T::zero()) + (-(z.abs())).exp().ln_1p();
            total += sp - y * z;
        }
        let g = self.any_grad(&[logits]);
        Ok(self.push(
            scalar(total / normalizer),
            Op::BceLogits {
                logits,
                targets,
                normalizer,
            },
            g,
        ))
    }

    /// `sum_i w_i x_i` over scalar values.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, w) in terms {
            let t = self.value(v);
            if t.numel() != 1 {
                return Err(Error::Dimension {
                    op: "weighted_sum",
                    lhs: t.shape().to_vec(),
                    rhs: vec![1],
                });
            }
            total += w * t.data()[0];
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let g = self.any_grad(&vars);
        Ok(self.push(scalar(total), Op::WeightedSum(terms.to_vec()), g))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum::<T>();
        let g = self.any_grad(&[x]);
        self.push(scalar(total), Op::SumAll(x), g)
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    /// Back-propagates from the scalar `loss`. Leaf gradients are replaced.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Dimension {
                op: "backward",
                lhs: self.value(loss).shape().to_vec(),
                rhs: vec![1],
            });
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_ops = 0;
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(scalar(T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.backward_ops += 1;
            for (v, g) in self.backward_node(i, &gout)? {
                self.accumulate(v, g);
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, gout: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if ng(*a) {
                    out.push((*a, ops::matmul_nt(gout, self.value(*b))?));
                }
                if ng(*b) {
                    out.push((*b, ops::matmul_tn(self.value(*a), gout)?));
                }
            }
            Op::MatMulNt(a, b) => {
                if ng(*a) {
                    out.push((*a, ops::matmul(gout, self.value(*b))?));
                }
                if ng(*b) {
                    out.push((*b, ops::matmul_tn(gout, self.value(*a))?));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, gout.clone()));
                out.push((*b, gout.clone()));
            }
            Op::AddBias(x, bias) => {
                if ng(*bias) {
                    let n = gout.cols();
                    let mut gb = vec![T::zero(); n];
                    for row in gout.data().chunks(n) {
                        for (a, &g) in gb.iter_mut().zip(row) {
                            *a += g;
                        }
                    }
                    out.push((*bias, Tensor::from_parts(self.value(*bias).shape().to_vec(), gb)));
                }
                out.push((*x, gout.clone()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if ng(*a) {
                    let d = gout.data().iter().zip(vb.data()).map(|(&g, &y)| g * y).collect();
                    out.push((*a, Tensor::from_parts(va.shape().to_vec(), d)));
                }
                if ng(*b) {
                    let d = gout.data().iter().zip(va.data()).map(|(&g, &x)| g * x).collect();
                    out.push((*b, Tensor::from_parts(vb.shape().to_vec(), d)));
                }
            }
            Op::Scale(x, s) => out.push((*x, gout.map(|g| g * *s))),
            Op::OneMinus(x) => out.push((*x, gout.map(|g| -g))),
            Op::Relu(x) => {
                // subgradient 0 at the kink
                let d = gout
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                out.push((*x, Tensor::from_parts(gout.shape().to_vec(), d)));
            }
            Op::Sigmoid(x) => {
                let d = gout
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect();
                out.push((*x, Tensor::from_parts(gout.shape().to_vec(), d)));
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let d = xv.cols();
                let nf = T::lit(d as f64);
                let mut dx = vec![T::zero(); xv.numel()];
                let mut dg = vec![T::zero(); d];
                let mut db = vec![T::zero(); d];
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for r in 0..xv.rows() {
                    let row = xv.row(r);
                    let grow = gout.row(r);
                    let (mean, rstd) = norm_stats(row, *eps);
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * rstd;
                        dg[j] += grow[j] * xhat[j];
                        db[j] += grow[j];
                        dxhat[j] = grow[j] * gv.data()[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat[j];
                    }
                    m1 /= nf;
                    m2 /= nf;
                    for j in 0..d {
                        dx[r * d + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                out.push((*x, Tensor::from_parts(xv.shape().to_vec(), dx)));
                out.push((*gain, Tensor::from_parts(gv.shape().to_vec(), dg)));
                out.push((*bias, Tensor::from_parts(self.value(*bias).shape().to_vec(), db)));
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => {
                let grads = self.attention_backward(*q, *k, *v, layout, probs, gout);
                out.extend(grads);
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let d = t.cols();
                let mut g = vec![T::zero(); t.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut g[id as usize * d..(id as usize + 1) * d];
                    for (a, &b) in dst.iter_mut().zip(gout.row(r)) {
                        *a += b;
                    }
                }
                out.push((*table, Tensor::from_parts(t.shape().to_vec(), g)));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if ng(p) {
                        let mut g = Vec::with_capacity(gout.rows() * w);
                        for r in 0..gout.rows() {
                            g.extend_from_slice(&gout.row(r)[offset..offset + w]);
                        }
                        out.push((p, Tensor::from_parts(self.value(p).shape().to_vec(), g)));
                    }
                    offset += w;
                }
            }
            Op::GatedScan {
                forget,
                input,
                batch,
                len,
            } => {
                let (f, u, c) = (self.value(*forget), self.value(*input), &node.value);
                let d = f.cols();
                let mut df = vec![T::zero(); f.numel()];
                let mut du = vec![T::zero(); f.numel()];
                for b in 0..*batch {
                    let mut carry = vec![T::zero(); d];
                    for t in (0..*len).rev() {
                        let r = (b * len + t) * d;
                        for j in 0..d {
                            let g = gout.data()[r + j] + carry[j];
                            let ft = f.data()[r + j];
                            let prev = if t == 0 {
                                T::zero()
                            } else {
                                c.data()[r - d + j]
                            };
                            df[r + j] = g * (prev - u.data()[r + j]);
                            du[r + j] = g * (T::one() - ft);
                            carry[j] = g * ft;
                        }
                    }
                }
                out.push((*forget, Tensor::from_parts(f.shape().to_vec(), df)));
                out.push((*input, Tensor::from_parts(u.shape().to_vec(), du)));
            }
            Op::MaxPool { x, argmax } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let mut g = vec![T::zero(); xv.numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    g[src * d + o % d] += gout.data()[o];
                }
                out.push((*x, Tensor::from_parts(xv.shape().to_vec(), g)));
            }
            Op::SmoothedCe {
                logits,
                targets,
                smoothing,
                normalizer,
                probs,
            } => {
                let lv = self.value(*logits);
                let v = lv.cols();
                let scale = gout.data()[0] / *normalizer;
                let uniform = *smoothing / T::lit(v as f64);
                let mut g = vec![T::zero(); lv.numel()];
                for (r, &t) in targets.iter().enumerate() {
                    if t == u32::MAX {
                        continue;
                    }
                    for j in 0..v {
                        let mut q = uniform;
                        if j == t as usize {
                            q += T::one() - *smoothing;
                        }
                        g[r * v + j] = (probs[r * v + j] - q) * scale;
                    }
                }
                out.push((*logits, Tensor::from_parts(lv.shape().to_vec(), g)));
            }
            Op::BceLogits {
                logits,
                targets,
                normalizer,
            } => {
                let lv = self.value(*logits);
                let scale = gout.data()[0] / *normalizer;
                let g = lv
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&z, &y)| (sigmoid_scalar(z) - y) * scale)
                    .collect();
                out.push((*logits, Tensor::from_parts(lv.shape().to_vec(), g)));
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    out.push((v, scalar(gout.data()[0] * w)));
                }
            }
            Op::SumAll(x) => {
                let xv = self.value(*x);
                out.push((*x, Tensor::full(xv.shape(), gout.data()[0])));
            }
        }
        Ok(out)
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttnLayout,
        probs: &[T],
        gout: &Tensor<T>,
    ) -> Vec<(Var, Tensor<T>)> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let d = vq.cols();
        let AttnLayout {
            batch,
            lq,
            lk,
            heads,
            ..
        } = *layout;
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut dq = vec![T::zero(); vq.numel()];
        let mut dk = vec![T::zero(); vk.numel()];
        let mut dv = vec![T::zero(); vv.numel()];
        let mut dp = vec![T::zero(); lk];
        for b in 0..batch {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..lq {
                    let p = &probs[((b * heads + h) * lq + i) * lk..((b * heads + h) * lq + i + 1) * lk];
                    let go = &gout.data()[(b * lq + i) * d + c0..(b * lq + i) * d + c0 + dh];
                    // dP = dO V^T, dV += P^T dO
                    let mut dot_pd = T::zero();
                    for j in 0..lk {
                        if p[j] == T::zero() {
                            dp[j] = T::zero();
                            continue;
                        }
                        let vr = (b * lk + j) * d + c0;
                        dp[j] = ops::dot(go, &vv.data()[vr..vr + dh]);
                        dot_pd += dp[j] * p[j];
                        for (a, &g) in dv[vr..vr + dh].iter_mut().zip(go) {
                            *a += p[j] * g;
                        }
                    }
                    // dS = P (dP - <dP, P>), scaled into dQ and dK
                    let qr = (b * lq + i) * d + c0;
                    for j in 0..lk {
                        if p[j] == T::zero() {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - dot_pd) * scale;
                        let kr = (b * lk + j) * d + c0;
                        for c in 0..dh {
                            dq[qr + c] += ds * vk.data()[kr + c];
                            dk[kr + c] += ds * vq.data()[qr + c];
                        }
                    }
                }
            }
        }
        vec![
            (q, Tensor::from_parts(vq.shape().to_vec(), dq)),
            (k, Tensor::from_parts(vk.shape().to_vec(), dk)),
            (v, Tensor::from_parts(vv.shape().to_vec(), dv)),
        ]
    }
}
