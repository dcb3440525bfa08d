//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles in
//! execution order, so node inputs always precede the node. [`Tape::backward`]
//! walks the records once in reverse and accumulates gradients into every
//! leaf created with `requires_grad = true` (and into any intermediate
//! marked with [`Tape::retain_grad`]). A tape is built for one forward pass
//! and may be differentiated only once.
//!
//! ```
//! use mft::autodiff::Tape;
//! use mft::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

pub mod gradcheck;
pub(crate) mod kernels;

pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use kernels::sigmoid as sigmoid_scalar;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::{add_into, gemm, sigmoid};

const RMS_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    DivScalar(usize, f64),
    Sigmoid(usize),
    Silu(usize),
    RmsNorm {
        x: usize,
        gain: usize,
        inv_rms: Vec<f64>,
    },
    GatherRows {
        src: usize,
        rows: Vec<usize>,
    },
    ConcatRows(usize, usize),
    CausalAttention {
        q: usize,
        k: usize,
        v: usize,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(usize),
    StraightThrough(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    retain: bool,
}

/// Gradient buffers produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            retain: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            retain: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Keep the gradient of an intermediate value after backward.
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain = true;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    /// `a[m×k] · b[n×k]ᵀ`, the layout of a linear layer applied to row inputs.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_t",
                left: vec![m, k],
                right: vec![n, k2],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, 0.0, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMulT(a.0, b.0), &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    /// Adds a length-`n` row vector to every row of `a[m×n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let rv = self.value(row);
        if rv.len() != n {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: vec![m, n],
                right: rv.shape().to_vec(),
            });
        }
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(n) {
            add_into(chunk, rv.data());
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::AddRow(a.0, row.0), &[a.0, row.0]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), "elementwise_mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a).map(|x| x * factor);
        self.push(t, Op::Scale(a.0, factor), &[a.0])
    }

    /// `a / divisor`, elementwise.
    pub fn div_scalar(&mut self, a: Var, divisor: f64) -> Var {
        let t = self.value(a).map(|x| x / divisor);
        self.push(t, Op::DivScalar(a.0, divisor), &[a.0])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a.0), &[a.0])
    }

    /// `x·σ(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * sigmoid(x));
        self.push(t, Op::Silu(a.0), &[a.0])
    }

    /// Row-wise RMS normalization with a learnable gain of length `n`.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let g = self.value(gain);
        if g.len() != n {
            return Err(Error::ShapeMismatch {
                op: "rms_norm",
                left: vec![m, n],
                right: g.shape().to_vec(),
            });
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; m * n];
        let mut inv_rms = Vec::with_capacity(m);
        for (row, orow) in xv.chunks(n).zip(out.chunks_mut(n)) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let r = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(r);
            for ((o, &v), &gj) in orow.iter_mut().zip(row).zip(g.data()) {
                *o = v * r * gj;
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            t,
            Op::RmsNorm {
                x: x.0,
                gain: gain.0,
                inv_rms,
            },
            &[x.0, gain.0],
        ))
    }

    /// Selects rows of a 2-D tensor; repeated indices are allowed.
    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        let (r, n) = self.dims2(src)?;
        if rows.is_empty() {
            return Err(Error::invalid("gather_rows: empty index list"));
        }
        let sv = self.value(src).data();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &i in rows {
            if i >= r {
                return Err(Error::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    extent: r,
                });
            }
            out.extend_from_slice(&sv[i * n..(i + 1) * n]);
        }
        let t = Tensor::new(vec![rows.len(), n], out)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                src: src.0,
                rows: rows.to_vec(),
            },
            &[src.0],
        ))
    }

    /// Stacks `a[m1×n]` above `b[m2×n]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m1, n) = self.dims2(a)?;
        let (m2, n2) = self.dims2(b)?;
        if n != n2 {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                left: vec![m1, n],
                right: vec![m2, n2],
            });
        }
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        let t = Tensor::new(vec![m1 + m2, n], out)?;
        Ok(self.push(t, Op::ConcatRows(a.0, b.0), &[a.0, b.0]))
    }

    /// Multi-head scaled dot-product attention with a causal mask.
    ///
    /// `q`, `k`, `v` are `[batch·seq, d]` with rows grouped by sequence;
    /// head `h` owns columns `h·d/heads .. (h+1)·d/heads`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let (rows, d) = self.dims2(q)?;
        for other in [k, v] {
            if self.shape(other) != [rows, d] {
                return Err(Error::ShapeMismatch {
                    op: "causal_attention",
                    left: vec![rows, d],
                    right: self.shape(other).to_vec(),
                });
            }
        }
        if rows != batch * seq || heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!(
                "causal_attention: {rows} rows, d={d} incompatible with batch={batch} seq={seq} heads={heads}"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dh;
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &qv[(b * seq + i) * d + col..][..dh];
                    let prow = &mut probs[pbase + i * seq..pbase + (i + 1) * seq];
                    let mut mx = f64::NEG_INFINITY;
                    for (j, p) in prow.iter_mut().enumerate().take(i + 1) {
                        let kj = &kv[(b * seq + j) * d + col..][..dh];
                        let s = scale * qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>();
                        *p = s;
                        mx = mx.max(s);
                    }
                    let mut z = 0.0;
                    for p in prow.iter_mut().take(i + 1) {
                        *p = (*p - mx).exp();
                        z += *p;
                    }
                    let orow = &mut out[(b * seq + i) * d + col..][..dh];
                    for (j, p) in prow.iter_mut().enumerate().take(i + 1) {
                        *p /= z;
                        let vj = &vv[(b * seq + j) * d + col..][..dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += *p * x;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(
            t,
            Op::CausalAttention {
                q: q.0,
                k: k.0,
                v: v.0,
                batch,
                seq,
                heads,
                probs,
            },
            &[q.0, k.0, v.0],
        ))
    }

    /// Mean over rows of `−log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, vocab) = self.dims2(logits)?;
        if targets.len() != n {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: vec![n, vocab],
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::IndexOutOfRange {
                op: "softmax_cross_entropy",
                index: bad,
                extent: vocab,
            });
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; n * vocab];
        let mut total = 0.0;
        for ((row, prow), &t) in lv.chunks(vocab).zip(probs.chunks_mut(vocab)).zip(targets) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &x) in prow.iter_mut().zip(row) {
                *p = (x - mx).exp();
                z += *p;
            }
            for p in prow.iter_mut() {
                *p /= z;
            }
            total += mx + z.ln() - row[t];
        }
        let t = Tensor::scalar(total / n as f64);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
            &[logits.0],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(t, Op::Sum(a.0), &[a.0])
    }

    /// Emits `forward` as the value while routing gradients to `src`
    /// unchanged (Jacobian treated as identity).
    pub fn straight_through(&mut self, src: Var, forward: Tensor) -> Result<Var> {
        self.value(src).check_same_shape(&forward, "straight_through")?;
        Ok(self.push(forward, Op::StraightThrough(src.0), &[src.0]))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::BackwardAlreadyRun);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;

        let n_nodes = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n_nodes];
        let mut kept: Vec<Option<Tensor>> = vec![None; n_nodes];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backward_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) || node.retain {
                kept[idx] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(Gradients { grads: kept })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Lazily allocated accumulator for input `i`, or None if it needs no gradient.
        macro_rules! acc {
            ($i:expr) => {{
                let i = $i;
                if nodes[i].requires_grad {
                    Some(grads[i].get_or_insert_with(|| vec![0.0; nodes[i].value.len()]))
                } else {
                    None
                }
            }};
        }
        let val = |i: usize| nodes[i].value.data();

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = nodes[a].value.dims2().expect("2-D");
                let n = nodes[b].value.shape()[1];
                if let Some(ga) = acc!(a) {
                    gemm(m, n, k, g, false, val(b), true, 1.0, ga);
                }
                if let Some(gb) = acc!(b) {
                    gemm(k, m, n, val(a), true, g, false, 1.0, gb);
                }
            }
            &Op::MatMulT(a, b) => {
                let (m, k) = nodes[a].value.dims2().expect("2-D");
                let n = nodes[b].value.shape()[0];
                if let Some(ga) = acc!(a) {
                    gemm(m, n, k, g, false, val(b), false, 1.0, ga);
                }
                if let Some(gb) = acc!(b) {
                    gemm(n, m, k, g, true, val(a), false, 1.0, gb);
                }
            }
            &Op::Add(a, b) => {
                if let Some(ga) = acc!(a) {
                    add_into(ga, g);
                }
                if let Some(gb) = acc!(b) {
                    add_into(gb, g);
                }
            }
            &Op::AddRow(a, row) => {
                if let Some(ga) = acc!(a) {
                    add_into(ga, g);
                }
                let n = nodes[row].value.len();
                if let Some(gr) = acc!(row) {
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if let Some(ga) = acc!(a) {
                    for ((o, &gi), &bi) in ga.iter_mut().zip(g).zip(val(b)) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = acc!(b) {
                    for ((o, &gi), &ai) in gb.iter_mut().zip(g).zip(val(a)) {
                        *o += gi * ai;
                    }
                }
            }
            &Op::Scale(a, f) => {
                if let Some(ga) = acc!(a) {
                    for (o, &gi) in ga.iter_mut().zip(g) {
                        *o += gi * f;
                    }
                }
            }
            &Op::DivScalar(a, d) => {
                if let Some(ga) = acc!(a) {
                    for (o, &gi) in ga.iter_mut().zip(g) {
                        *o += gi / d;
                    }
                }
            }
            &Op::Sigmoid(a) => {
                if let Some(ga) = acc!(a) {
                    for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(node.value.data()) {
                        *o += gi * y * (1.0 - y);
                    }
                }
            }
            &Op::Silu(a) => {
                if let Some(ga) = acc!(a) {
                    for ((o, &gi), &x) in ga.iter_mut().zip(g).zip(val(a)) {
                        let s = sigmoid(x);
                        *o += gi * s * (1.0 + x * (1.0 - s));
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (x, gain) = (*x, *gain);
                let n = nodes[gain].value.len();
                let xv = val(x);
                let gv = val(gain);
                if let Some(gg) = acc!(gain) {
                    for ((row, grow), &r) in xv.chunks(n).zip(g.chunks(n)).zip(inv_rms) {
                        for ((o, &xi), &gi) in gg.iter_mut().zip(row).zip(grow) {
                            *o += gi * xi * r;
                        }
                    }
                }
                if let Some(gx) = acc!(x) {
                    for (((row, grow), orow), &r) in
                        xv.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)).zip(inv_rms)
                    {
                        let dot = row
                            .iter()
                            .zip(grow)
                            .zip(gv)
                            .map(|((&xi, &gi), &wj)| gi * wj * xi * r)
                            .sum::<f64>()
                            / n as f64;
                        for (((o, &xi), &gi), &wj) in orow.iter_mut().zip(row).zip(grow).zip(gv) {
                            *o += r * (gi * wj - xi * r * dot);
                        }
                    }
                }
            }
            Op::GatherRows { src, rows } => {
                let n = nodes[*src].value.shape()[1];
                if let Some(gs) = acc!(*src) {
                    for (&r, grow) in rows.iter().zip(g.chunks(n)) {
                        add_into(&mut gs[r * n..(r + 1) * n], grow);
                    }
                }
            }
            &Op::ConcatRows(a, b) => {
                let split = nodes[a].value.len();
                if let Some(ga) = acc!(a) {
                    add_into(ga, &g[..split]);
                }
                if let Some(gb) = acc!(b) {
                    add_into(gb, &g[split..]);
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (q, k, v, batch, seq, heads) = (*q, *k, *v, *batch, *seq, *heads);
                let d = nodes[q].value.shape()[1];
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (val(q), val(k), val(v));
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                let mut dv = vec![0.0; vv.len()];
                let mut dp = vec![0.0; seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let col = h * dh;
                        let pbase = (b * heads + h) * seq * seq;
                        for i in 0..seq {
                            let ri = (b * seq + i) * d + col;
                            let gi = &g[ri..ri + dh];
                            let prow = &probs[pbase + i * seq..pbase + i * seq + i + 1];
                            let mut inner = 0.0;
                            for (j, &p) in prow.iter().enumerate() {
                                let rj = (b * seq + j) * d + col;
                                dp[j] = gi.iter().zip(&vv[rj..rj + dh]).map(|(x, y)| x * y).sum();
                                inner += p * dp[j];
                                for (o, &x) in dv[rj..rj + dh].iter_mut().zip(gi) {
                                    *o += p * x;
                                }
                            }
                            for (j, &p) in prow.iter().enumerate() {
                                let ds = p * (dp[j] - inner) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let rj = (b * seq + j) * d + col;
                                for c in 0..dh {
                                    dq[ri + c] += ds * kv[rj + c];
                                    dk[rj + c] += ds * qv[ri + c];
                                }
                            }
                        }
                    }
                }
                for (i, buf) in [(q, dq), (k, dk), (v, dv)] {
                    if let Some(gi) = acc!(i) {
                        add_into(gi, &buf);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let vocab = nodes[*logits].value.shape()[1];
                let coef = g[0] / targets.len() as f64;
                if let Some(gl) = acc!(*logits) {
                    for ((orow, prow), &t) in gl.chunks_mut(vocab).zip(probs.chunks(vocab)).zip(targets) {
                        for (o, &p) in orow.iter_mut().zip(prow) {
                            *o += coef * p;
                        }
                        orow[t] -= coef;
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(ga) = acc!(a) {
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            &Op::StraightThrough(src) => {
                if let Some(gs) = acc!(src) {
                    add_into(gs, g);
                }
            }
        }
    }
}
