//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! Every operation appends a node holding its forward value plus whatever it
//! needs for the backward pass. [`Graph::backward`] walks the tape in reverse
//! and accumulates gradients into every node that (transitively) depends on a
//! parameter.

use std::ops::Range;
use std::sync::Arc;

use super::kernels::{self, Trans};
use super::scalar::{s, Scalar};
use super::tensor::Tensor;
use crate::error::{bail, Result};
use crate::par;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One diagonal block of a block-sparse attention: a set of query rows that all
/// attend over the same contiguous range of embedding rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnBlock {
    /// Query row indices (into the un-permuted batch).
    pub rows: Vec<usize>,
    /// Key/value row range.
    pub emb: Range<usize>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    SoftTargetKl {
        logits: Var,
        target: Vec<T>,
        probs: Vec<T>,
    },
    SumAll(Var),
    Rope {
        x: Var,
        head_dim: usize,
        seq_len: usize,
        base: f64,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        seq_len: usize,
        probs: Vec<T>,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    ConcatCols(Var, Var),
    StackRows(Vec<Var>),
    BlockAttention {
        q: Var,
        k: Var,
        v: Var,
        blocks: Arc<Vec<AttnBlock>>,
        probs: Vec<Vec<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The tape.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of a leaf accumulated by the last [`Graph::backward`], if it required one.
    /// Interior gradients are released during the reverse pass.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a));
        let (k2, n) = dims2(self.value(b));
        if k != k2 {
            bail!(Dimension, "matmul inner dims {} vs {}", k, k2);
        }
        let c = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], c)?, Op::MatMul(a, b), rg))
    }

    /// `a @ bᵀ` where `b` is a row-major `out×in` weight.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a));
        let (n, k2) = dims2(self.value(b));
        if k != k2 {
            bail!(Dimension, "matmul_nt inner dims {} vs {}", k, k2);
        }
        let c = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], c)?, Op::MatMulNt(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            bail!(
                Dimension,
                "{}: shapes {:?} and {:?} differ",
                what,
                self.value(a).shape(),
                self.value(b).shape()
            );
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| kernels::silu(x)).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let rg = self.rg(&[a]);
        self.push(t, Op::Silu(a), rg)
    }

    /// RMS norm over the last dimension, scaled by `gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let d = self.value(gain).len();
        if self.value(x).cols() != d || d == 0 {
            bail!(
                Dimension,
                "rms_norm gain of {} over rows of {}",
                d,
                self.value(x).cols()
            );
        }
        let mut out = vec![T::zero(); self.value(x).len()];
        let inv_rms = kernels::rms_norm_rows(
            self.value(x).data(),
            self.value(gain).data(),
            s(eps),
            &mut out,
        );
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain]);
        Ok(self.push(t, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.has_non_finite() {
            bail!(Numeric, "softmax input contains non-finite values");
        }
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            kernels::softmax_in_place(row);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SoftmaxRows(x), rg))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = dims2(self.value(logits));
        if targets.len() != n {
            bail!(Dimension, "{} targets for {} rows", targets.len(), n);
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            bail!(Index, "target {} out of range for vocab {}", bad, v);
        }
        let lv = self.value(logits).data();
        let rows: Vec<(T, Vec<T>)> = par::map_range(n, |r| {
            let row = &lv[r * v..(r + 1) * v];
            let lse = kernels::log_sum_exp(row);
            let p: Vec<T> = row.iter().map(|&z| (z - lse).exp()).collect();
            (lse - row[targets[r]], p)
        });
        let mut probs = Vec::with_capacity(n * v);
        let mut total = T::zero();
        for (l, p) in rows {
            total = total + l;
            probs.extend(p);
        }
        let loss = total / s(n.max(1) as f64);
        if !loss.is_finite() {
            bail!(Numeric, "cross entropy is not finite");
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::new(vec![1], vec![loss])?,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean over rows of `KL(target ‖ softmax(logits))`, in nats.
    pub fn soft_target_kl(&mut self, logits: Var, target: &[T]) -> Result<Var> {
        let (n, v) = dims2(self.value(logits));
        if target.len() != n * v {
            bail!(Dimension, "target distribution has {} entries, expected {}", target.len(), n * v);
        }
        let lv = self.value(logits).data();
        let rows: Vec<(T, Vec<T>)> = par::map_range(n, |r| {
            let row = &lv[r * v..(r + 1) * v];
            let tr = &target[r * v..(r + 1) * v];
            let lse = kernels::log_sum_exp(row);
            let mut kl = T::zero();
            let mut p = Vec::with_capacity(v);
            for (&z, &y) in row.iter().zip(tr) {
                let lq = z - lse;
                p.push(lq.exp());
                if y > T::zero() {
                    kl = kl + y * (y.ln() - lq);
                }
            }
            (kl, p)
        });
        let mut probs = Vec::with_capacity(n * v);
        let mut total = T::zero();
        for (l, p) in rows {
            total = total + l;
            probs.extend(p);
        }
        let loss = total / s(n.max(1) as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::new(vec![1], vec![loss])?,
            Op::SoftTargetKl {
                logits,
                target: target.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![1], vec![total]).unwrap(), Op::SumAll(x), rg)
    }

    /// Rotary position embedding; rows are grouped into consecutive sequences of
    /// `seq_len`, so row `r` sits at position `r % seq_len`.
    pub fn rope(&mut self, x: Var, head_dim: usize, seq_len: usize, base: f64) -> Result<Var> {
        let xv = self.value(x);
        if head_dim % 2 != 0 || xv.cols() % head_dim != 0 || xv.rows() % seq_len != 0 {
            bail!(Dimension, "rope: bad head_dim {} / seq_len {} for {:?}", head_dim, seq_len, xv.shape());
        }
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        let angles: Vec<(Vec<T>, Vec<T>)> =
            (0..seq_len).map(|p| kernels::rope_angles(p, head_dim, base)).collect();
        for (r, row) in out.chunks_mut(c).enumerate() {
            let (cs, sn) = &angles[r % seq_len];
            kernels::rope_row(row, head_dim, cs, sn, false);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::Rope {
                x,
                head_dim,
                seq_len,
                base,
            },
            rg,
        ))
    }

    /// Causal self-attention within each consecutive `seq_len`-row sequence.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        seq_len: usize,
    ) -> Result<Var> {
        let (n, d) = dims2(self.value(q));
        if self.value(k).shape() != self.value(q).shape()
            || self.value(v).shape() != self.value(q).shape()
        {
            bail!(Dimension, "attention q/k/v shapes differ");
        }
        if d % n_heads != 0 || n % seq_len != 0 {
            bail!(Dimension, "attention: {} heads over width {}, seq_len {} over {} rows", n_heads, d, seq_len, n);
        }
        let hd = d / n_heads;
        let n_seq = n / seq_len;
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let per_seq: Vec<(Vec<T>, Vec<T>)> = par::map_range(n_seq, |b| {
            let r = b * seq_len * d..(b + 1) * seq_len * d;
            kernels::causal_attention(&qv[r.clone()], &kv[r.clone()], &vv[r], seq_len, seq_len, n_heads, hd)
        });
        let mut out = Vec::with_capacity(n * d);
        let mut probs = Vec::with_capacity(n_seq * n_heads * seq_len * seq_len);
        for (o, p) in per_seq {
            out.extend(o);
            probs.extend(p);
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            Op::CausalAttention {
                q,
                k,
                v,
                n_heads,
                seq_len,
                probs,
            },
            rg,
        ))
    }

    /// Select rows of `table` (embedding lookup); backward scatter-adds.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (r, c) = dims2(tv);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                bail!(Index, "row {} out of range for {} rows", i, r);
            }
            out.extend_from_slice(tv.row(i));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![idx.len(), c], out)?,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Contiguous row range `[start, end)`.
    pub fn slice_rows(&mut self, x: Var, rows: Range<usize>) -> Result<Var> {
        if rows.end > self.value(x).rows() || rows.start > rows.end {
            bail!(Index, "row range {:?} out of {}", rows, self.value(x).rows());
        }
        let idx: Vec<usize> = rows.collect();
        self.gather_rows(x, &idx)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = dims2(self.value(a));
        let (rb, cb) = dims2(self.value(b));
        if ra != rb {
            bail!(Dimension, "concat_cols rows {} vs {}", ra, rb);
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(self.value(a).row(r));
            out.extend_from_slice(self.value(b).row(r));
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![ra, ca + cb], out)?, Op::ConcatCols(a, b), rg))
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = match parts.first() {
            Some(&p) => self.value(p).cols(),
            None => bail!(Dimension, "stack_rows of nothing"),
        };
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.value(p).cols() != c {
                bail!(Dimension, "stack_rows width mismatch");
            }
            rows += self.value(p).rows();
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![rows, c], out)?, Op::StackRows(parts.to_vec()), rg))
    }

    /// Block-diagonal attention: each block's query rows attend (softmax over
    /// `q·kᵀ`, no scaling) to the key/value rows in the block's embedding range.
    /// Rows not covered by any block produce zeros.
    pub fn block_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        blocks: Arc<Vec<AttnBlock>>,
    ) -> Result<Var> {
        let (n, d_in) = dims2(self.value(q));
        let (kr, kc) = dims2(self.value(k));
        let (vr, d_emb) = dims2(self.value(v));
        if kc != d_in || kr != vr {
            bail!(Dimension, "block attention: q width {}, k {}x{}, v {} rows", d_in, kr, kc, vr);
        }
        for b in blocks.iter() {
            if b.emb.end > kr || b.emb.is_empty() {
                bail!(Contract, "block embedding range {:?} invalid for {} rows", b.emb, kr);
            }
            if b.rows.iter().any(|&r| r >= n) {
                bail!(Contract, "block row outside batch of {}", n);
            }
        }
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let results: Vec<(Vec<T>, Vec<T>)> = par::map_range(blocks.len(), |bi| {
            let b = &blocks[bi];
            let m = b.rows.len();
            let dt = b.emb.len();
            let kt = &kv[b.emb.start * d_in..b.emb.end * d_in];
            let vt = &vv[b.emb.start * d_emb..b.emb.end * d_emb];
            let mut p = vec![T::zero(); m * dt];
            let mut o = vec![T::zero(); m * d_emb];
            for (i, &r) in b.rows.iter().enumerate() {
                kernels::attend_row(&qv[r * d_in..(r + 1) * d_in], kt, vt, &mut p[i * dt..(i + 1) * dt], &mut o[i * d_emb..(i + 1) * d_emb]);
            }
            (o, p)
        });
        let mut out = vec![T::zero(); n * d_emb];
        let mut probs = Vec::with_capacity(blocks.len());
        for (b, (o, p)) in blocks.iter().zip(results) {
            for (i, &r) in b.rows.iter().enumerate() {
                out[r * d_emb..(r + 1) * d_emb].copy_from_slice(&o[i * d_emb..(i + 1) * d_emb]);
            }
            probs.push(p);
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::new(vec![n, d_emb], out)?,
            Op::BlockAttention {
                q,
                k,
                v,
                blocks,
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from scalar `loss` (seeded with gradient 1).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            bail!(Dimension, "backward needs a scalar, got {:?}", self.value(loss).shape());
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let needs = |v: Var| nodes[v.0].requires_grad;
        fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(val(*a));
                let n = val(*b).cols();
                if needs(*a) {
                    let ga = acc(grads, *a, m * k);
                    kernels::gemm(Trans::N, Trans::T, m, n, k, T::one(), g, val(*b).data(), T::one(), ga);
                }
                if needs(*b) {
                    let gb = acc(grads, *b, k * n);
                    kernels::gemm(Trans::T, Trans::N, k, m, n, T::one(), val(*a).data(), g, T::one(), gb);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = dims2(val(*a));
                let n = val(*b).rows();
                if needs(*a) {
                    let ga = acc(grads, *a, m * k);
                    kernels::gemm(Trans::N, Trans::N, m, n, k, T::one(), g, val(*b).data(), T::one(), ga);
                }
                if needs(*b) {
                    let gb = acc(grads, *b, n * k);
                    kernels::gemm(Trans::T, Trans::N, n, m, k, T::one(), g, val(*a).data(), T::one(), gb);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        let gv = acc(grads, v, g.len());
                        gv.iter_mut().zip(g).for_each(|(o, &x)| *o = *o + x);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if needs(v) {
                        let od = val(other).data();
                        let gv = acc(grads, v, g.len());
                        for j in 0..g.len() {
                            gv[j] = gv[j] + g[j] * od[j];
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                let gv = acc(grads, *a, g.len());
                gv.iter_mut().zip(g).for_each(|(o, &x)| *o = *o + x * *c);
            }
            Op::Silu(a) => {
                let xd = val(*a).data();
                let gv = acc(grads, *a, g.len());
                for j in 0..g.len() {
                    gv[j] = gv[j] + g[j] * kernels::silu_grad(xd[j]);
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xd = val(*x).data();
                let gd = val(*gain).data();
                let mut dx = needs(*x).then(|| vec![T::zero(); xd.len()]);
                let mut dg = needs(*gain).then(|| vec![T::zero(); gd.len()]);
                kernels::rms_norm_backward(xd, gd, inv_rms, g, dx.as_deref_mut(), dg.as_deref_mut());
                if let Some(dx) = dx {
                    add_into(acc(grads, *x, xd.len()), &dx);
                }
                if let Some(dg) = dg {
                    add_into(acc(grads, *gain, gd.len()), &dg);
                }
            }
            Op::SoftmaxRows(x) => {
                let p = nodes[i].value.data();
                let c = nodes[i].value.cols();
                let gx = acc(grads, *x, p.len());
                for r in 0..p.len() / c {
                    kernels::softmax_backward_row(&p[r * c..(r + 1) * c], &g[r * c..(r + 1) * c], &mut gx[r * c..(r + 1) * c]);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let (n, v) = dims2(val(*logits));
                let scale = g[0] / s(n.max(1) as f64);
                let gl = acc(grads, *logits, n * v);
                for r in 0..n {
                    for j in 0..v {
                        gl[r * v + j] = gl[r * v + j] + probs[r * v + j] * scale;
                    }
                    gl[r * v + targets[r]] = gl[r * v + targets[r]] - scale;
                }
            }
            Op::SoftTargetKl { logits, target, probs } => {
                let (n, v) = dims2(val(*logits));
                let scale = g[0] / s(n.max(1) as f64);
                let gl = acc(grads, *logits, n * v);
                // Rows of the target sum to one, so d/dz = q - y.
                for j in 0..n * v {
                    gl[j] = gl[j] + (probs[j] - target[j]) * scale;
                }
            }
            Op::SumAll(x) => {
                let len = val(*x).len();
                let gx = acc(grads, *x, len);
                gx.iter_mut().for_each(|o| *o = *o + g[0]);
            }
            Op::Rope { x, head_dim, seq_len, base } => {
                let c = val(*x).cols();
                let mut back = g.to_vec();
                for (r, row) in back.chunks_mut(c).enumerate() {
                    let (cs, sn) = kernels::rope_angles::<T>(r % seq_len, *head_dim, *base);
                    kernels::rope_row(row, *head_dim, &cs, &sn, true);
                }
                add_into(acc(grads, *x, back.len()), &back);
            }
            Op::CausalAttention { q, k, v, n_heads, seq_len, probs } => {
                let (n, d) = dims2(val(*q));
                let (dq, dk, dv) = attention_backward(
                    val(*q).data(),
                    val(*k).data(),
                    val(*v).data(),
                    probs,
                    g,
                    n,
                    d,
                    *n_heads,
                    *seq_len,
                );
                for (var, gr) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if needs(var) {
                        add_into(acc(grads, var, gr.len()), &gr);
                    }
                }
            }
            Op::GatherRows { table, idx } => {
                let (r, c) = dims2(val(*table));
                let gt = acc(grads, *table, r * c);
                for (j, &row) in idx.iter().enumerate() {
                    for t in 0..c {
                        gt[row * c + t] = gt[row * c + t] + g[j * c + t];
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (ra, ca) = dims2(val(*a));
                let cb = val(*b).cols();
                let w = ca + cb;
                if needs(*a) {
                    let ga = acc(grads, *a, ra * ca);
                    for r in 0..ra {
                        for j in 0..ca {
                            ga[r * ca + j] = ga[r * ca + j] + g[r * w + j];
                        }
                    }
                }
                if needs(*b) {
                    let gb = acc(grads, *b, ra * cb);
                    for r in 0..ra {
                        for j in 0..cb {
                            gb[r * cb + j] = gb[r * cb + j] + g[r * w + ca + j];
                        }
                    }
                }
            }
            Op::StackRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    if needs(p) {
                        add_into(acc(grads, p, len), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::BlockAttention { q, k, v, blocks, probs } => {
                let d_in = val(*q).cols();
                let d_emb = val(*v).cols();
                let (qv, kv, vv) = (val(*q).data(), val(*k).data(), val(*v).data());
                let parts: Vec<(Vec<T>, Vec<T>, Vec<T>)> = par::map_range(blocks.len(), |bi| {
                    let b = &blocks[bi];
                    let p = &probs[bi];
                    let m = b.rows.len();
                    let dt = b.emb.len();
                    let mut xb = Vec::with_capacity(m * d_in);
                    let mut gb = Vec::with_capacity(m * d_emb);
                    for &r in &b.rows {
                        xb.extend_from_slice(&qv[r * d_in..(r + 1) * d_in]);
                        gb.extend_from_slice(&g[r * d_emb..(r + 1) * d_emb]);
                    }
                    let kt = &kv[b.emb.start * d_in..b.emb.end * d_in];
                    let vt = &vv[b.emb.start * d_emb..b.emb.end * d_emb];
                    // dV = Pᵀ dO
                    let mut dvt = vec![T::zero(); dt * d_emb];
                    kernels::gemm(Trans::T, Trans::N, dt, m, d_emb, T::one(), p, &gb, T::zero(), &mut dvt);
                    // dP = dO Vᵀ, then through the softmax
                    let dp = kernels::matmul_nt(&gb, vt, m, d_emb, dt);
                    let mut ds = vec![T::zero(); m * dt];
                    for r in 0..m {
                        kernels::softmax_backward_row(&p[r * dt..(r + 1) * dt], &dp[r * dt..(r + 1) * dt], &mut ds[r * dt..(r + 1) * dt]);
                    }
                    let dxb = kernels::matmul(&ds, kt, m, dt, d_in);
                    let mut dkt = vec![T::zero(); dt * d_in];
                    kernels::gemm(Trans::T, Trans::N, dt, m, d_in, T::one(), &ds, &xb, T::zero(), &mut dkt);
                    (dxb, dkt, dvt)
                });
                for (b, (dxb, dkt, dvt)) in blocks.iter().zip(parts) {
                    if needs(*q) {
                        let gq = acc(grads, *q, qv.len());
                        for (j, &r) in b.rows.iter().enumerate() {
                            add_into(&mut gq[r * d_in..(r + 1) * d_in], &dxb[j * d_in..(j + 1) * d_in]);
                        }
                    }
                    if needs(*k) {
                        let gk = acc(grads, *k, kv.len());
                        add_into(&mut gk[b.emb.start * d_in..b.emb.end * d_in], &dkt);
                    }
                    if needs(*v) {
                        let gv = acc(grads, *v, vv.len());
                        add_into(&mut gv[b.emb.start * d_emb..b.emb.end * d_emb], &dvt);
                    }
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    g: &[T],
    n: usize,
    d: usize,
    n_heads: usize,
    seq_len: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let hd = d / n_heads;
    let n_seq = n / seq_len;
    let scale: T = s(1.0 / (hd as f64).sqrt());
    let l = seq_len;
    let pieces: Vec<(Vec<T>, Vec<T>, Vec<T>)> = par::map_range(n_seq * n_heads, |job| {
        let (b, h) = (job / n_heads, job % n_heads);
        let base = b * l * d + h * hd;
        let p = &probs[(b * n_heads + h) * l * l..(b * n_heads + h + 1) * l * l];
        let (qs, ks, vs, gs) = (&q[base..], &k[base..], &v[base..], &g[base..]);
        // dV = Pᵀ dO
        let mut dvh = vec![T::zero(); l * hd];
        T::gemm(l, l, hd, T::one(), p, 1, l as isize, gs, d as isize, 1, T::zero(), &mut dvh, hd as isize, 1);
        // dP = dO Vᵀ
        let mut dp = vec![T::zero(); l * l];
        T::gemm(l, hd, l, T::one(), gs, d as isize, 1, vs, 1, d as isize, T::zero(), &mut dp, l as isize, 1);
        let mut ds = vec![T::zero(); l * l];
        for r in 0..l {
            let vis = r + 1;
            kernels::softmax_backward_row(&p[r * l..r * l + vis], &dp[r * l..r * l + vis], &mut ds[r * l..r * l + vis]);
        }
        // dQ = scale dS K ; dK = scale dSᵀ Q
        let mut dqh = vec![T::zero(); l * hd];
        T::gemm(l, l, hd, scale, &ds, l as isize, 1, ks, d as isize, 1, T::zero(), &mut dqh, hd as isize, 1);
        let mut dkh = vec![T::zero(); l * hd];
        T::gemm(l, l, hd, scale, &ds, 1, l as isize, qs, d as isize, 1, T::zero(), &mut dkh, hd as isize, 1);
        (dqh, dkh, dvh)
    });
    let mut dq = vec![T::zero(); n * d];
    let mut dk = vec![T::zero(); n * d];
    let mut dv = vec![T::zero(); n * d];
    for (job, (dqh, dkh, dvh)) in pieces.into_iter().enumerate() {
        let (b, h) = (job / n_heads, job % n_heads);
        for r in 0..l {
            let o = (b * l + r) * d + h * hd;
            dq[o..o + hd].copy_from_slice(&dqh[r * hd..(r + 1) * hd]);
            dk[o..o + hd].copy_from_slice(&dkh[r * hd..(r + 1) * hd]);
            dv[o..o + hd].copy_from_slice(&dvh[r * hd..(r + 1) * hd]);
        }
    }
    (dq, dk, dv)
}
