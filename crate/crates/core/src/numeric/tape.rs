//! Reverse-mode differentiation over a recorded sequence of matrix operations.
//!
//! The operation set is deliberately coarse. Each op is one of the batched
//! building blocks of the message-passing forward pass (windowed linear maps,
//! gather-add with ReLU, segment means, content attention, edge combination
//! and the two losses), so a full forward pass over a graph records a few
//! dozen nodes rather than millions of scalar ones.
//!
//! ```
//! use corgi::numeric::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.constant(Tensor::row_vector(&[1.0, 2.0, 3.0]));
//! let w = tape.leaf(Tensor::from_vec(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap(), true);
//! let y = tape.linear(x, w, 0).unwrap();
//! let loss = tape.sum(y);
//! assert_eq!(tape.value(loss).data(), &[6.0]);
//!
//! let grads = tape.backward(loss).unwrap();
//! // d/dW sum(W·x) = outer(1, x)
//! assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
//! ```

use std::rc::Rc;

use rand::Rng;

use super::activation::{leaky_relu, sigmoid, softmax_into};
use super::tensor::{gemm_grad_w, gemm_grad_x, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row-to-segment assignment for mean aggregation.
#[derive(Debug, Clone)]
pub struct Segments {
    target: Vec<usize>,
    inv_count: Vec<f64>,
}

impl Segments {
    /// `target[r]` is the segment receiving row `r`. Empty segments are legal
    /// and aggregate to zero.
    pub fn new(target: Vec<usize>, num_segments: usize) -> Result<Self> {
        let mut count = vec![0usize; num_segments];
        for &t in &target {
            if t >= num_segments {
                return Err(Error::IndexOutOfRange {
                    what: "segment",
                    index: t,
                    bound: num_segments,
                });
            }
            count[t] += 1;
        }
        let inv_count = count
            .iter()
            .map(|&c| if c == 0 { 0.0 } else { 1.0 / c as f64 })
            .collect();
        Ok(Segments { target, inv_count })
    }

    pub fn num_segments(&self) -> usize {
        self.inv_count.len()
    }

    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }
}

/// Which query row and which block of key rows each attention output row uses.
#[derive(Debug, Clone)]
pub struct AttentionPlan {
    query_rows: Vec<usize>,
    key_ranges: Vec<(usize, usize)>,
    offsets: Vec<usize>,
}

impl AttentionPlan {
    pub fn new(query_rows: Vec<usize>, key_ranges: Vec<(usize, usize)>) -> Result<Self> {
        if query_rows.len() != key_ranges.len() {
            return Err(Error::shape(
                "AttentionPlan",
                (query_rows.len(), 1),
                (key_ranges.len(), 1),
            ));
        }
        let mut offsets = Vec::with_capacity(key_ranges.len() + 1);
        let mut total = 0;
        offsets.push(0);
        for &(s, e) in &key_ranges {
            total += e.saturating_sub(s);
            offsets.push(total);
        }
        Ok(AttentionPlan {
            query_rows,
            key_ranges,
            offsets,
        })
    }

    pub fn len(&self) -> usize {
        self.query_rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.query_rows.is_empty()
    }

    pub fn key_range(&self, r: usize) -> (usize, usize) {
        self.key_ranges[r]
    }

    pub fn query_row(&self, r: usize) -> usize {
        self.query_rows[r]
    }

    /// Position of row `r`'s probabilities in the flat alpha buffer.
    pub fn alpha_span(&self, r: usize) -> std::ops::Range<usize> {
        self.offsets[r]..self.offsets[r + 1]
    }
}

struct AttentionNode {
    query: usize,
    keys: usize,
    values: usize,
    concat_weights: Option<usize>,
    plan: Rc<AttentionPlan>,
    slope: f64,
    pre: Vec<f64>,
    alpha: Vec<f64>,
}

enum Op {
    Leaf,
    Linear {
        x: usize,
        w: usize,
        col: usize,
    },
    AddBias {
        x: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    GatherAdd {
        a: usize,
        a_idx: Option<Rc<[usize]>>,
        b: usize,
        b_idx: Option<Rc<[usize]>>,
        relu: bool,
    },
    Relu {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    Dropout {
        x: usize,
        keep: Vec<bool>,
        scale: f64,
    },
    SegmentMean {
        x: usize,
        seg: Rc<Segments>,
    },
    ConcatRows {
        a: usize,
        b: usize,
    },
    Attention(Box<AttentionNode>),
    Combine {
        e: usize,
        first: Option<usize>,
        second: Option<usize>,
        block: usize,
        concat: bool,
    },
    SigmoidBce {
        x: usize,
        targets: Rc<[f64]>,
    },
    Mse {
        x: usize,
        targets: Rc<[f64]>,
    },
    Sum {
        x: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf that requires one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when `v` is not a gradient-carrying leaf or the loss does not
    /// depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn acc<'a>(grads: &'a mut [Option<Tensor>], nodes: &[Node], i: usize) -> &'a mut Tensor {
    let (r, c) = nodes[i].value.shape();
    grads[i].get_or_insert_with(|| Tensor::zeros(r, c))
}

fn check_index(idx: &[usize], bound: usize, what: &'static str) -> Result<()> {
    match idx.iter().find(|&&i| i >= bound) {
        Some(&i) => Err(Error::IndexOutOfRange {
            what,
            index: i,
            bound,
        }),
        None => Ok(()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Attention probabilities recorded by a [`Tape::content_attention`] node,
    /// as the plan plus the flat buffer indexed by [`AttentionPlan::alpha_span`].
    pub fn attention_weights(&self, v: Var) -> Option<(&AttentionPlan, &[f64])> {
        match &self.nodes[v.0].op {
            Op::Attention(node) => Some((&node.plan, &node.alpha)),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// `x · w[:, col..col + x.cols]ᵀ`.
    pub fn linear(&mut self, x: Var, w: Var, col: usize) -> Result<Var> {
        let out = self.value(x).matmul_window_t(self.value(w), col)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            out,
            Op::Linear {
                x: x.0,
                w: w.0,
                col,
            },
            rg,
        ))
    }

    /// Adds the `1 × cols` row `b` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::shape("add_bias", (1, xv.cols()), bv.shape()));
        }
        let mut out = xv.clone();
        let bias = bv.data().to_vec();
        for r in 0..out.rows() {
            for (o, bb) in out.row_mut(r).iter_mut().zip(&bias) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddBias { x: x.0, b: b.0 }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a: a.0, b: b.0 }, rg))
    }

    /// `out[r] = act(a[a_idx[r]] + b[b_idx[r]])`; a missing index means the
    /// identity map. With both indices present the output has `a_idx.len()`
    /// rows.
    pub fn gather_add(
        &mut self,
        a: Var,
        a_idx: Option<Rc<[usize]>>,
        b: Var,
        b_idx: Option<Rc<[usize]>>,
        relu: bool,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Error::shape("gather_add", (0, av.cols()), (0, bv.cols())));
        }
        let rows_a = a_idx.as_ref().map_or(av.rows(), |i| i.len());
        let rows_b = b_idx.as_ref().map_or(bv.rows(), |i| i.len());
        if rows_a != rows_b {
            return Err(Error::shape("gather_add", (rows_a, av.cols()), (rows_b, bv.cols())));
        }
        if let Some(i) = &a_idx {
            check_index(i, av.rows(), "gather row")?;
        }
        if let Some(i) = &b_idx {
            check_index(i, bv.rows(), "gather row")?;
        }
        let cols = av.cols();
        let mut out = Tensor::zeros(rows_a, cols);
        for r in 0..rows_a {
            let ra = a_idx.as_ref().map_or(r, |i| i[r]);
            let rb = b_idx.as_ref().map_or(r, |i| i[r]);
            let (xa, xb) = (av.row(ra), bv.row(rb));
            for ((o, p), q) in out.row_mut(r).iter_mut().zip(xa).zip(xb) {
                let s = p + q;
                *o = if relu && s <= 0.0 { 0.0 } else { s };
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            out,
            Op::GatherAdd {
                a: a.0,
                a_idx,
                b: b.0,
                b_idx,
                relu,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(super::activation::relu);
        let rg = self.rg(x);
        self.push(out, Op::Relu { x: x.0 }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid { x: x.0 }, rg)
    }

    /// Inverted dropout: zeroes each entry with probability `rate` and scales
    /// survivors by `1 / (1 - rate)`. A zero rate records nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let scale = 1.0 / (1.0 - rate);
        let xv = self.value(x);
        let keep: Vec<bool> = (0..xv.len()).map(|_| rng.random::<f64>() >= rate).collect();
        let mut out = xv.clone();
        for (o, &k) in out.data_mut().iter_mut().zip(&keep) {
            *o = if k { *o * scale } else { 0.0 };
        }
        let rg = self.rg(x);
        self.push(out, Op::Dropout { x: x.0, keep, scale }, rg)
    }

    /// Mean of the rows assigned to each segment, in row order.
    pub fn segment_mean(&mut self, x: Var, seg: Rc<Segments>) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != seg.len() {
            return Err(Error::shape("segment_mean", (seg.len(), xv.cols()), xv.shape()));
        }
        let mut out = Tensor::zeros(seg.num_segments(), xv.cols());
        for (r, &t) in seg.target.iter().enumerate() {
            let w = seg.inv_count[t];
            for (o, v) in out.row_mut(t).iter_mut().zip(xv.row(r)) {
                *o += v * w;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::SegmentMean { x: x.0, seg }, rg))
    }

    /// Stacks `a` on top of `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Error::shape("concat_rows", (0, av.cols()), (0, bv.cols())));
        }
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let out = Tensor::from_vec(av.rows() + bv.rows(), av.cols(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::ConcatRows { a: a.0, b: b.0 }, rg))
    }

    /// Content attention. For each plan row `r` with query `q = query[plan.query_row(r)]`
    /// and key rows `k` in `plan.key_range(r)`:
    ///
    /// * score `c_k = leaky(q · keys[k])`, or with `concat_weights = [p_q; p_k]`
    ///   `c_k = leaky(p_q · q + p_k · keys[k])`,
    /// * `alpha = softmax(c)`,
    /// * `out[r] = Σ_k alpha_k values[k]`.
    ///
    /// Rows with an empty key range produce zeros.
    pub fn content_attention(
        &mut self,
        query: Var,
        keys: Var,
        values: Var,
        concat_weights: Option<Var>,
        plan: Rc<AttentionPlan>,
        slope: f64,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(query), self.value(keys), self.value(values));
        if qv.cols() != kv.cols() && concat_weights.is_none() {
            return Err(Error::shape("content_attention (dot)", (0, qv.cols()), kv.shape()));
        }
        if kv.rows() != vv.rows() {
            return Err(Error::shape("content_attention values", kv.shape(), vv.shape()));
        }
        let p = concat_weights.map(|p| self.value(p));
        if let Some(p) = p {
            if p.shape() != (1, qv.cols() + kv.cols()) {
                return Err(Error::shape(
                    "content_attention (concat)",
                    (1, qv.cols() + kv.cols()),
                    p.shape(),
                ));
            }
        }
        check_index(&plan.query_rows, qv.rows(), "attention query")?;
        for &(s, e) in &plan.key_ranges {
            if s > e || e > kv.rows() {
                return Err(Error::IndexOutOfRange {
                    what: "attention key",
                    index: e,
                    bound: kv.rows(),
                });
            }
        }

        let total = *plan.offsets.last().unwrap_or(&0);
        let mut pre = vec![0.0; total];
        let mut alpha = vec![0.0; total];
        let mut scores = Vec::new();
        let mut out = Tensor::zeros(plan.len(), vv.cols());
        for r in 0..plan.len() {
            let (s, e) = plan.key_ranges[r];
            if s == e {
                continue;
            }
            let q = qv.row(plan.query_rows[r]);
            let off = plan.offsets[r];
            let query_term = p.map(|p| super::tensor::dot(&p.data()[..q.len()], q));
            scores.clear();
            for k in s..e {
                let raw = match (p, query_term) {
                    (Some(p), Some(qt)) => qt + super::tensor::dot(&p.data()[q.len()..], kv.row(k)),
                    _ => super::tensor::dot(q, kv.row(k)),
                };
                pre[off + k - s] = raw;
                scores.push(leaky_relu(raw, slope));
            }
            softmax_into(&scores, &mut alpha[off..off + (e - s)]);
            let orow = out.row_mut(r);
            for k in s..e {
                let a = alpha[off + k - s];
                for (o, v) in orow.iter_mut().zip(vv.row(k)) {
                    *o += a * v;
                }
            }
        }
        let rg = self.rg(query) || self.rg(keys) || self.rg(values) || concat_weights.is_some_and(|p| self.rg(p));
        Ok(self.push(
            out,
            Op::Attention(Box::new(AttentionNode {
                query: query.0,
                keys: keys.0,
                values: values.0,
                concat_weights: concat_weights.map(|p| p.0),
                plan,
                slope,
                pre,
                alpha,
            })),
            rg,
        ))
    }

    /// Combines edge embeddings `e` (`2·block` rows: first block then second
    /// block) with per-block content-attention rows. Addition requires equal
    /// widths; concatenation appends the attention columns (zeros where a
    /// block has no attention input).
    pub fn combine_edges(
        &mut self,
        e: Var,
        first: Option<Var>,
        second: Option<Var>,
        concat: bool,
    ) -> Result<Var> {
        let ev = self.value(e);
        if ev.rows() % 2 != 0 {
            return Err(Error::shape("combine_edges", (ev.rows() + 1, ev.cols()), ev.shape()));
        }
        let block = ev.rows() / 2;
        let ca_cols = first
            .or(second)
            .map(|v| self.value(v).cols())
            .unwrap_or(ev.cols());
        for v in [first, second].into_iter().flatten() {
            let cv = self.value(v);
            if cv.shape() != (block, ca_cols) {
                return Err(Error::shape("combine_edges attention", (block, ca_cols), cv.shape()));
            }
        }
        if !concat && ca_cols != ev.cols() {
            return Err(Error::shape("combine_edges add", (block, ev.cols()), (block, ca_cols)));
        }
        let out_cols = if concat { ev.cols() + ca_cols } else { ev.cols() };
        let mut out = Tensor::zeros(ev.rows(), out_cols);
        for r in 0..ev.rows() {
            let (src, local) = if r < block { (first, r) } else { (second, r - block) };
            let orow = out.row_mut(r);
            orow[..ev.cols()].copy_from_slice(ev.row(r));
            if let Some(c) = src {
                let crow = self.nodes[c.0].value.row(local);
                if concat {
                    orow[ev.cols()..].copy_from_slice(crow);
                } else {
                    for (o, v) in orow.iter_mut().zip(crow) {
                        *o += v;
                    }
                }
            }
        }
        let rg = self.rg(e) || first.is_some_and(|v| self.rg(v)) || second.is_some_and(|v| self.rg(v));
        Ok(self.push(
            out,
            Op::Combine {
                e: e.0,
                first: first.map(|v| v.0),
                second: second.map(|v| v.0),
                block,
                concat,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(x)` against `targets`, computed
    /// from logits for stability.
    pub fn sigmoid_bce(&mut self, x: Var, targets: Rc<[f64]>) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() != 1 || xv.rows() != targets.len() || targets.is_empty() {
            return Err(Error::shape("sigmoid_bce", (targets.len(), 1), xv.shape()));
        }
        let n = targets.len() as f64;
        let total: f64 = xv
            .data()
            .iter()
            .zip(targets.iter())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::row_vector(&[total / n]),
            Op::SigmoidBce { x: x.0, targets },
            rg,
        ))
    }

    pub fn mse(&mut self, x: Var, targets: Rc<[f64]>) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() != 1 || xv.rows() != targets.len() || targets.is_empty() {
            return Err(Error::shape("mse", (targets.len(), 1), xv.shape()));
        }
        let n = targets.len() as f64;
        let total: f64 = xv
            .data()
            .iter()
            .zip(targets.iter())
            .map(|(&p, &y)| (p - y) * (p - y))
            .sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::row_vector(&[total / n]), Op::Mse { x: x.0, targets }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::row_vector(&[s]), Op::Sum { x: x.0 }, rg)
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::shape("backward", (1, 1), lv.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::row_vector(&[1.0]));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        // Only leaves keep gradients.
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let wants = |i: usize| nodes[i].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, col } => {
                if wants(*x) {
                    gemm_grad_x(g, &nodes[*w].value, *col, acc(grads, nodes, *x));
                }
                if wants(*w) {
                    gemm_grad_w(g, &nodes[*x].value, *col, acc(grads, nodes, *w));
                }
            }
            Op::AddBias { x, b } => {
                if wants(*x) {
                    acc(grads, nodes, *x).add_assign(g);
                }
                if wants(*b) {
                    let gb = acc(grads, nodes, *b);
                    for r in 0..g.rows() {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    acc(grads, nodes, *a).add_assign(g);
                }
                if wants(*b) {
                    acc(grads, nodes, *b).add_assign(g);
                }
            }
            Op::GatherAdd {
                a,
                a_idx,
                b,
                b_idx,
                relu,
            } => {
                let out = &node.value;
                let masked;
                let gm: &Tensor = if *relu {
                    let mut t = g.clone();
                    for (v, &o) in t.data_mut().iter_mut().zip(out.data()) {
                        if o <= 0.0 {
                            *v = 0.0;
                        }
                    }
                    masked = t;
                    &masked
                } else {
                    g
                };
                for (src, idx) in [(*a, a_idx), (*b, b_idx)] {
                    if !wants(src) {
                        continue;
                    }
                    let ga = acc(grads, nodes, src);
                    match idx {
                        None => ga.add_assign(gm),
                        Some(idx) => {
                            for (r, &t) in idx.iter().enumerate() {
                                for (o, v) in ga.row_mut(t).iter_mut().zip(gm.row(r)) {
                                    *o += v;
                                }
                            }
                        }
                    }
                }
            }
            Op::Relu { x } => {
                if wants(*x) {
                    let gx = acc(grads, nodes, *x);
                    for ((o, v), &y) in gx.data_mut().iter_mut().zip(g.data()).zip(node.value.data()) {
                        if y > 0.0 {
                            *o += v;
                        }
                    }
                }
            }
            Op::Sigmoid { x } => {
                if wants(*x) {
                    let gx = acc(grads, nodes, *x);
                    for ((o, v), &y) in gx.data_mut().iter_mut().zip(g.data()).zip(node.value.data()) {
                        *o += v * y * (1.0 - y);
                    }
                }
            }
            Op::Dropout { x, keep, scale } => {
                if wants(*x) {
                    let gx = acc(grads, nodes, *x);
                    for ((o, v), &k) in gx.data_mut().iter_mut().zip(g.data()).zip(keep) {
                        if k {
                            *o += v * scale;
                        }
                    }
                }
            }
            Op::SegmentMean { x, seg } => {
                if wants(*x) {
                    let gx = acc(grads, nodes, *x);
                    for (r, &t) in seg.target.iter().enumerate() {
                        let w = seg.inv_count[t];
                        for (o, v) in gx.row_mut(r).iter_mut().zip(g.row(t)) {
                            *o += v * w;
                        }
                    }
                }
            }
            Op::ConcatRows { a, b } => {
                let split = nodes[*a].value.rows();
                if wants(*a) {
                    let ga = acc(grads, nodes, *a);
                    for (o, v) in ga.data_mut().iter_mut().zip(g.data()) {
                        *o += v;
                    }
                }
                if wants(*b) {
                    let gb = acc(grads, nodes, *b);
                    let tail = &g.data()[split * g.cols()..];
                    for (o, v) in gb.data_mut().iter_mut().zip(tail) {
                        *o += v;
                    }
                }
            }
            Op::Attention(att) => self.attention_backward(att, g, grads),
            Op::Combine {
                e,
                first,
                second,
                block,
                concat,
            } => {
                let ecols = nodes[*e].value.cols();
                if wants(*e) {
                    let ge = acc(grads, nodes, *e);
                    for r in 0..g.rows() {
                        for (o, v) in ge.row_mut(r).iter_mut().zip(&g.row(r)[..ecols]) {
                            *o += v;
                        }
                    }
                }
                for (src, start) in [(*first, 0), (*second, *block)] {
                    let Some(c) = src else { continue };
                    if !wants(c) {
                        continue;
                    }
                    let gc = acc(grads, nodes, c);
                    for r in 0..*block {
                        let grow = g.row(start + r);
                        let part = if *concat { &grow[ecols..] } else { grow };
                        for (o, v) in gc.row_mut(r).iter_mut().zip(part) {
                            *o += v;
                        }
                    }
                }
            }
            Op::SigmoidBce { x, targets } => {
                if wants(*x) {
                    let scale = g.data()[0] / targets.len() as f64;
                    let xv = &nodes[*x].value;
                    let gx = acc(grads, nodes, *x);
                    for ((o, &z), &y) in gx.data_mut().iter_mut().zip(xv.data()).zip(targets.iter()) {
                        *o += scale * (sigmoid(z) - y);
                    }
                }
            }
            Op::Mse { x, targets } => {
                if wants(*x) {
                    let scale = 2.0 * g.data()[0] / targets.len() as f64;
                    let xv = &nodes[*x].value;
                    let gx = acc(grads, nodes, *x);
                    for ((o, &p), &y) in gx.data_mut().iter_mut().zip(xv.data()).zip(targets.iter()) {
                        *o += scale * (p - y);
                    }
                }
            }
            Op::Sum { x } => {
                if wants(*x) {
                    let s = g.data()[0];
                    for o in acc(grads, nodes, *x).data_mut() {
                        *o += s;
                    }
                }
            }
        }
    }

    fn attention_backward(&self, att: &AttentionNode, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let qv = &nodes[att.query].value;
        let kv = &nodes[att.keys].value;
        let vv = &nodes[att.values].value;
        let pv = att.concat_weights.map(|p| &nodes[p].value);
        let qdim = qv.cols();

        let mut gq = Tensor::zeros(qv.rows(), qv.cols());
        let mut gk = Tensor::zeros(kv.rows(), kv.cols());
        let mut gvals = Tensor::zeros(vv.rows(), vv.cols());
        let mut gp = pv.map(|p| Tensor::zeros(1, p.cols()));

        let plan = &att.plan;
        let mut dalpha = Vec::new();
        for r in 0..plan.len() {
            let (s, e) = plan.key_ranges[r];
            if s == e {
                continue;
            }
            let off = plan.offsets[r];
            let grow = g.row(r);
            let alpha = &att.alpha[off..off + (e - s)];
            dalpha.clear();
            for (j, k) in (s..e).enumerate() {
                dalpha.push(super::tensor::dot(grow, vv.row(k)));
                for (o, v) in gvals.row_mut(k).iter_mut().zip(grow) {
                    *o += alpha[j] * v;
                }
            }
            let mix: f64 = alpha.iter().zip(&dalpha).map(|(a, d)| a * d).sum();
            let qrow_idx = plan.query_rows[r];
            for (j, k) in (s..e).enumerate() {
                let ds = alpha[j] * (dalpha[j] - mix);
                let pre = att.pre[off + j];
                let dc = if pre >= 0.0 { ds } else { ds * att.slope };
                if dc == 0.0 {
                    continue;
                }
                match (pv, gp.as_mut()) {
                    (Some(p), Some(gp)) => {
                        let (pq, pk) = p.data().split_at(qdim);
                        for (o, v) in gq.row_mut(qrow_idx).iter_mut().zip(pq) {
                            *o += dc * v;
                        }
                        for (o, v) in gk.row_mut(k).iter_mut().zip(pk) {
                            *o += dc * v;
                        }
                        let (gpq, gpk) = gp.data_mut().split_at_mut(qdim);
                        for (o, v) in gpq.iter_mut().zip(qv.row(qrow_idx)) {
                            *o += dc * v;
                        }
                        for (o, v) in gpk.iter_mut().zip(kv.row(k)) {
                            *o += dc * v;
                        }
                    }
                    _ => {
                        for (o, v) in gq.row_mut(qrow_idx).iter_mut().zip(kv.row(k)) {
                            *o += dc * v;
                        }
                        for (o, v) in gk.row_mut(k).iter_mut().zip(qv.row(qrow_idx)) {
                            *o += dc * v;
                        }
                    }
                }
            }
        }

        let mut deposit = |idx: usize, t: Tensor| {
            if nodes[idx].requires_grad {
                match &mut grads[idx] {
                    Some(existing) => existing.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        };
        deposit(att.query, gq);
        deposit(att.keys, gk);
        deposit(att.values, gvals);
        if let (Some(p), Some(gp)) = (att.concat_weights, gp) {
            deposit(p, gp);
        }
    }
}
