//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward pass. [`Tape::backward`] walks the tape in reverse
//! and accumulates parameter gradients into a [`ParameterStore`].

use std::rc::Rc;

use super::params::{ParamId, ParameterStore};
use super::tensor::{dot, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Constant sparse matrix used for pooling, neighbourhood means and
/// scatter-adds.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub rows: usize,
    pub cols: usize,
    /// `(row, col, weight)` triples.
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, row: usize, col: usize, weight: f64) {
        debug_assert!(row < self.rows && col < self.cols);
        self.entries.push((row, col, weight));
    }

    /// Row `r` averages the listed columns; empty groups give zero rows.
    pub fn mean_pool(groups: &[Vec<usize>], cols: usize) -> Self {
        let mut m = Self::new(groups.len(), cols);
        for (r, g) in groups.iter().enumerate() {
            let w = 1.0 / g.len().max(1) as f64;
            for &c in g {
                m.push(r, c, w);
            }
        }
        m
    }
}

/// One query block attending to one key block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionBlock {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

/// Which (query, key) pairs may interact in a fused attention call.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPlan {
    pub blocks: Vec<AttentionBlock>,
    pub heads: usize,
    /// Query `i` of a block sees only keys `j <= i` of the same block.
    pub causal: bool,
    /// `false` entries hide that key row from every query.
    pub key_mask: Option<Vec<bool>>,
}

impl AttentionPlan {
    /// Self-attention within consecutive segments of the given lengths.
    pub fn segments(lengths: &[usize], heads: usize, causal: bool) -> Self {
        let mut blocks = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for &len in lengths {
            blocks.push(AttentionBlock {
                q_start: start,
                q_len: len,
                k_start: start,
                k_len: len,
            });
            start += len;
        }
        Self {
            blocks,
            heads,
            causal,
            key_mask: None,
        }
    }

    pub fn with_key_mask(mut self, mask: Vec<bool>) -> Self {
        self.key_mask = Some(mask);
        self
    }

    fn visible(&self, block: &AttentionBlock, i: usize, j: usize) -> bool {
        if self.causal && j > i {
            return false;
        }
        self.key_mask
            .as_ref()
            .is_none_or(|m| m[block.k_start + j])
    }
}

/// Softmax normalisation axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    LeakyRelu(Var, f64),
    Relu(Var),
    GatherRows(Var, Rc<Vec<Option<usize>>>),
    Sparse(Rc<SparseMatrix>, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SoftmaxRows(Var),
    SegmentSoftmax(Var, Rc<Vec<usize>>),
    LayerNorm(Var, Vec<f64>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        plan: Rc<AttentionPlan>,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Tensor,
        count: usize,
    },
    Huber {
        pred: Var,
        targets: Vec<Option<f64>>,
        count: usize,
    },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation for one backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Option<Var>>,
}

fn add_into(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if self.params.len() <= id.0 {
            self.params.resize(id.0 + 1, None);
        }
        if let Some(v) = self.params[id.0] {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.params[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(b).clone();
        value.scale_assign(-1.0);
        value.add_assign(self.value(a));
        self.push(value, Op::Sub(a, b))
    }

    /// `x + b` with `b` a `1 x n` row broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let bias = self.value(b);
        assert_eq!(bias.rows(), 1);
        assert_eq!(bias.cols(), self.value(x).cols());
        let mut value = self.value(x).clone();
        let bias = self.value(b).row(0).to_vec();
        for r in 0..value.rows() {
            for (o, &c) in value.row_mut(r).iter_mut().zip(&bias) {
                *o += c;
            }
        }
        self.push(value, Op::AddRow(x, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape());
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Tensor::from_vec(x.rows(), x.cols(), data).unwrap();
        self.push(value, Op::Mul(a, b))
    }

    /// `x * g` with `g` a `1 x n` row broadcast over rows.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Var {
        let gain = self.value(g).row(0).to_vec();
        let mut value = self.value(x).clone();
        assert_eq!(gain.len(), value.cols());
        for r in 0..value.rows() {
            for (o, &c) in value.row_mut(r).iter_mut().zip(&gain) {
                *o *= c;
            }
        }
        self.push(value, Op::MulRow(x, g))
    }

    /// `x * c` with `c` an `m x 1` column broadcast over columns.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Var {
        let col = self.value(c).data().to_vec();
        let mut value = self.value(x).clone();
        assert_eq!(col.len(), value.rows());
        for (r, &s) in col.iter().enumerate() {
            for o in value.row_mut(r) {
                *o *= s;
            }
        }
        self.push(value, Op::MulCol(x, c))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale(x, s))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        self.push(value, Op::Transpose(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu(x, slope))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    /// Row `i` of the output is row `idx[i]` of `x`, or zeros for `None`.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<Option<usize>>) -> Var {
        let src = self.value(x);
        let mut value = Tensor::zeros(idx.len(), src.cols());
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                value.row_mut(r).copy_from_slice(src.row(i));
            }
        }
        self.push(value, Op::GatherRows(x, Rc::new(idx)))
    }

    /// Rows of an embedding table selected by id.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Var {
        self.gather_rows(table, ids.iter().map(|&i| Some(i)).collect())
    }

    /// `S * x` for a constant sparse `S`.
    pub fn sparse_matmul(&mut self, s: Rc<SparseMatrix>, x: Var) -> Var {
        let src = self.value(x);
        assert_eq!(s.cols, src.rows(), "sparse matmul shape");
        let mut value = Tensor::zeros(s.rows, src.cols());
        for &(r, c, w) in &s.entries {
            let row = src.row(c).to_vec();
            for (o, v) in value.row_mut(r).iter_mut().zip(row) {
                *o += w * v;
            }
        }
        self.push(value, Op::Sparse(s, x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.row_mut(r)[off..off + t.cols()].copy_from_slice(t.row(r));
            }
            off += t.cols();
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let value = Tensor::from_vec(rows, cols, data).unwrap();
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    /// Softmax along `axis`. Masked entries (`false`) get exactly zero
    /// weight; a fully masked line is all zeros. The mask has the same
    /// row-major layout as `x`.
    pub fn softmax(&mut self, x: Var, axis: Axis, mask: Option<&[bool]>) -> Var {
        match axis {
            Axis::Rows => self.softmax_rows(x, mask),
            Axis::Cols => {
                let [r, c] = self.shape(x);
                let mask_t = mask.map(|m| {
                    let mut t = vec![false; m.len()];
                    for i in 0..r {
                        for j in 0..c {
                            t[j * r + i] = m[i * c + j];
                        }
                    }
                    t
                });
                let xt = self.transpose(x);
                let s = self.softmax_rows(xt, mask_t.as_deref());
                self.transpose(s)
            }
        }
    }

    fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Var {
        let src = self.value(x);
        let cols = src.cols();
        let mut value = Tensor::zeros(src.rows(), cols);
        for r in 0..src.rows() {
            let keep = |j: usize| mask.is_none_or(|m| m[r * cols + j]);
            let row = src.row(r);
            let max = (0..cols)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            let out = value.row_mut(r);
            for j in 0..cols {
                if keep(j) {
                    out[j] = (row[j] - max).exp();
                    total += out[j];
                }
            }
            for o in out.iter_mut() {
                *o /= total;
            }
        }
        self.push(value, Op::SoftmaxRows(x))
    }

    /// Softmax over the entries of an `n x 1` column sharing a group id.
    pub fn segment_softmax(&mut self, x: Var, groups: Rc<Vec<usize>>) -> Var {
        let src = self.value(x);
        assert_eq!(src.cols(), 1);
        assert_eq!(src.rows(), groups.len());
        let n_groups = groups.iter().copied().max().map_or(0, |m| m + 1);
        let mut max = vec![f64::NEG_INFINITY; n_groups];
        for (i, &g) in groups.iter().enumerate() {
            max[g] = max[g].max(src.data()[i]);
        }
        let mut data: Vec<f64> = groups
            .iter()
            .enumerate()
            .map(|(i, &g)| (src.data()[i] - max[g]).exp())
            .collect();
        let mut total = vec![0.0; n_groups];
        for (i, &g) in groups.iter().enumerate() {
            total[g] += data[i];
        }
        for (i, &g) in groups.iter().enumerate() {
            data[i] /= total[g];
        }
        self.push(Tensor::column(data), Op::SegmentSoftmax(x, groups))
    }

    /// Per-row standardisation (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let src = self.value(x);
        let n = src.cols() as f64;
        let mut value = src.clone();
        let mut inv_std = Vec::with_capacity(src.rows());
        for r in 0..src.rows() {
            let row = value.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(value, Op::LayerNorm(x, inv_std))
    }

    /// Fused scaled dot-product attention over head-split columns.
    ///
    /// `q` is `Nq x d`, `k` and `v` are `Nk x d`; each head uses a
    /// contiguous `d / heads` column slice. Queries with no visible key
    /// produce zero rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, plan: Rc<AttentionPlan>) -> Var {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let d = qt.cols();
        assert_eq!(kt.cols(), d);
        assert_eq!(vt.cols(), d);
        assert_eq!(kt.rows(), vt.rows());
        assert_eq!(d % plan.heads, 0, "head split");
        let dh = d / plan.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(qt.rows(), d);
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for b in &plan.blocks {
            for h in 0..plan.heads {
                let cs = h * dh..(h + 1) * dh;
                for i in 0..b.q_len {
                    let qi = &qt.row(b.q_start + i)[cs.clone()];
                    scores.clear();
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..b.k_len {
                        if plan.visible(b, i, j) {
                            let s = dot(qi, &kt.row(b.k_start + j)[cs.clone()]) * scale;
                            max = max.max(s);
                            scores.push(Some(s));
                        } else {
                            scores.push(None);
                        }
                    }
                    let base = probs.len();
                    if max == f64::NEG_INFINITY {
                        probs.extend(std::iter::repeat_n(0.0, b.k_len));
                        continue;
                    }
                    let mut total = 0.0;
                    for s in &scores {
                        let p = s.map_or(0.0, |s| (s - max).exp());
                        total += p;
                        probs.push(p);
                    }
                    let row = &mut out.row_mut(b.q_start + i)[cs.clone()];
                    for j in 0..b.k_len {
                        let p = &mut probs[base + j];
                        *p /= total;
                        if *p != 0.0 {
                            let vj = &vt.row(b.k_start + j)[cs.clone()];
                            for (o, &x) in row.iter_mut().zip(vj) {
                                *o += *p * x;
                            }
                        }
                    }
                }
            }
        }
        self.push(out, Op::Attention { q, k, v, plan, probs })
    }

    /// Attention weights recorded by an [`Tape::attention`] node, laid out
    /// block by block, head by head, query row by query row.
    pub fn attention_probs(&self, v: Var) -> Option<(&AttentionPlan, &[f64])> {
        match &self.nodes[v.0].op {
            Op::Attention { plan, probs, .. } => Some((plan, probs)),
            _ => None,
        }
    }

    /// Every attention node recorded so far, in tape order.
    pub fn attention_nodes(&self) -> impl Iterator<Item = (&AttentionPlan, &[f64])> {
        self.nodes.iter().filter_map(|n| match &n.op {
            Op::Attention { plan, probs, .. } => Some((plan.as_ref(), probs.as_slice())),
            _ => None,
        })
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of
    /// `logits`; `None` rows are excluded.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Var {
        let src = self.value(logits);
        assert_eq!(src.rows(), targets.len());
        let mut probs = Tensor::zeros(src.rows(), src.cols());
        let mut loss = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = src.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + total.ln();
            loss += log_z - row[t];
            for (p, &v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
            count += 1;
        }
        let value = Tensor::scalar(if count > 0 { loss / count as f64 } else { 0.0 });
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            },
        )
    }

    /// Mean piecewise Huber error of an `m x 1` prediction: `e^2` when
    /// `|e| < 1`, else `|e| - 1/2`. `None` targets are excluded.
    pub fn huber(&mut self, pred: Var, targets: Vec<Option<f64>>) -> Var {
        let src = self.value(pred);
        assert_eq!(src.cols(), 1);
        assert_eq!(src.rows(), targets.len());
        let mut loss = 0.0;
        let mut count = 0;
        for (p, t) in src.data().iter().zip(&targets) {
            if let Some(t) = t {
                loss += huber_value(p - t);
                count += 1;
            }
        }
        let value = Tensor::scalar(if count > 0 { loss / count as f64 } else { 0.0 });
        self.push(value, Op::Huber { pred, targets, count })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(value, Op::Mean(x))
    }

    /// Backpropagates from the scalar `loss` and adds parameter gradients
    /// into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore) {
        assert_eq!(self.shape(loss), [1, 1], "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backward_node(node, g, &mut grads, store);
        }
    }

    fn backward_node(
        &self,
        node: &Node,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        store: &mut ParameterStore,
    ) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => store.accumulate_grad(*id, &g),
            Op::MatMul(a, b) => {
                let ga = g.matmul_t(val(*b));
                let gb = val(*a).t_matmul(&g);
                add_into(&mut grads[a.0], ga);
                add_into(&mut grads[b.0], gb);
            }
            Op::Add(a, b) => {
                add_into(&mut grads[a.0], g.clone());
                add_into(&mut grads[b.0], g);
            }
            Op::Sub(a, b) => {
                add_into(&mut grads[b.0], g.map(|x| -x));
                add_into(&mut grads[a.0], g);
            }
            Op::AddRow(x, b) => {
                let mut gb = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, &v) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                add_into(&mut grads[b.0], gb);
                add_into(&mut grads[x.0], g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let ga = zip_map(&g, vb, |x, y| x * y);
                let gb = zip_map(&g, va, |x, y| x * y);
                add_into(&mut grads[a.0], ga);
                add_into(&mut grads[b.0], gb);
            }
            Op::MulRow(x, gain) => {
                let (vx, vg) = (val(*x), val(*gain));
                let mut gx = g.clone();
                let mut gg = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        gx.set(r, c, g.get(r, c) * vg.get(0, c));
                        gg.data_mut()[c] += g.get(r, c) * vx.get(r, c);
                    }
                }
                add_into(&mut grads[x.0], gx);
                add_into(&mut grads[gain.0], gg);
            }
            Op::MulCol(x, col) => {
                let (vx, vc) = (val(*x), val(*col));
                let mut gx = g.clone();
                let mut gc = Tensor::zeros(g.rows(), 1);
                for r in 0..g.rows() {
                    let s = vc.data()[r];
                    gc.data_mut()[r] = dot(g.row(r), vx.row(r));
                    for o in gx.row_mut(r) {
                        *o *= s;
                    }
                }
                add_into(&mut grads[x.0], gx);
                add_into(&mut grads[col.0], gc);
            }
            Op::Scale(x, s) => add_into(&mut grads[x.0], g.map(|v| v * s)),
            Op::Transpose(x) => add_into(&mut grads[x.0], g.transpose()),
            Op::LeakyRelu(x, slope) => {
                let gx = zip_map(&g, val(*x), |gv, xv| if xv > 0.0 { gv } else { slope * gv });
                add_into(&mut grads[x.0], gx);
            }
            Op::Relu(x) => {
                let gx = zip_map(&g, val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                add_into(&mut grads[x.0], gx);
            }
            Op::GatherRows(x, idx) => {
                let [r, c] = val(*x).shape();
                let mut gx = Tensor::zeros(r, c);
                for (row, i) in idx.iter().enumerate() {
                    if let Some(i) = *i {
                        for (o, &v) in gx.row_mut(i).iter_mut().zip(g.row(row)) {
                            *o += v;
                        }
                    }
                }
                add_into(&mut grads[x.0], gx);
            }
            Op::Sparse(s, x) => {
                let mut gx = Tensor::zeros(s.cols, g.cols());
                for &(r, c, w) in &s.entries {
                    for (o, &v) in gx.row_mut(c).iter_mut().zip(g.row(r)) {
                        *o += w * v;
                    }
                }
                add_into(&mut grads[x.0], gx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let [r, c] = val(*p).shape();
                    let mut gp = Tensor::zeros(r, c);
                    for row in 0..r {
                        gp.row_mut(row).copy_from_slice(&g.row(row)[off..off + c]);
                    }
                    off += c;
                    add_into(&mut grads[p.0], gp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let [r, c] = val(*p).shape();
                    let gp = Tensor::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec()).unwrap();
                    off += r;
                    add_into(&mut grads[p.0], gp);
                }
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let s = dot(y.row(r), g.row(r));
                    for ((o, &yv), &gv) in gx.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                        *o = yv * (gv - s);
                    }
                }
                add_into(&mut grads[x.0], gx);
            }
            Op::SegmentSoftmax(x, groups) => {
                let y = node.value.data();
                let n_groups = groups.iter().copied().max().map_or(0, |m| m + 1);
                let mut s = vec![0.0; n_groups];
                for (i, &grp) in groups.iter().enumerate() {
                    s[grp] += y[i] * g.data()[i];
                }
                let gx = groups
                    .iter()
                    .enumerate()
                    .map(|(i, &grp)| y[i] * (g.data()[i] - s[grp]))
                    .collect();
                add_into(&mut grads[x.0], Tensor::column(gx));
            }
            Op::LayerNorm(x, inv_std) => {
                let y = &node.value;
                let n = y.cols() as f64;
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let mg = gr.iter().sum::<f64>() / n;
                    let mgy = dot(gr, yr) / n;
                    for ((o, &yv), &gv) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = inv_std[r] * (gv - mg - yv * mgy);
                    }
                }
                add_into(&mut grads[x.0], gx);
            }
            Op::Attention { q, k, v, plan, probs } => {
                let (qt, kt, vt) = (val(*q), val(*k), val(*v));
                let d = qt.cols();
                let dh = d / plan.heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = Tensor::zeros(qt.rows(), d);
                let mut gk = Tensor::zeros(kt.rows(), d);
                let mut gv = Tensor::zeros(vt.rows(), d);
                let mut dp = Vec::new();
                let mut pos = 0;
                for b in &plan.blocks {
                    for h in 0..plan.heads {
                        let cs = h * dh..(h + 1) * dh;
                        for i in 0..b.q_len {
                            let p = &probs[pos..pos + b.k_len];
                            pos += b.k_len;
                            let go = &g.row(b.q_start + i)[cs.clone()];
                            dp.clear();
                            let mut sum = 0.0;
                            for (j, &pj) in p.iter().enumerate() {
                                if pj == 0.0 {
                                    dp.push(0.0);
                                    continue;
                                }
                                let vj = &vt.row(b.k_start + j)[cs.clone()];
                                let gvj = &mut gv.row_mut(b.k_start + j)[cs.clone()];
                                for (o, &x) in gvj.iter_mut().zip(go) {
                                    *o += pj * x;
                                }
                                let dpj = dot(go, vj);
                                sum += pj * dpj;
                                dp.push(dpj);
                            }
                            let qi = qt.row(b.q_start + i)[cs.clone()].to_vec();
                            for (j, &pj) in p.iter().enumerate() {
                                if pj == 0.0 {
                                    continue;
                                }
                                let ds = pj * (dp[j] - sum) * scale;
                                let kj = &kt.row(b.k_start + j)[cs.clone()];
                                let gqi = &mut gq.row_mut(b.q_start + i)[cs.clone()];
                                for (o, &x) in gqi.iter_mut().zip(kj) {
                                    *o += ds * x;
                                }
                                let gkj = &mut gk.row_mut(b.k_start + j)[cs.clone()];
                                for (o, &x) in gkj.iter_mut().zip(&qi) {
                                    *o += ds * x;
                                }
                            }
                        }
                    }
                }
                add_into(&mut grads[q.0], gq);
                add_into(&mut grads[k.0], gk);
                add_into(&mut grads[v.0], gv);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let s = g.item() / (*count).max(1) as f64;
                let mut gl = Tensor::zeros(probs.rows(), probs.cols());
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for (o, &p) in gl.row_mut(r).iter_mut().zip(probs.row(r)) {
                            *o = s * p;
                        }
                        gl.row_mut(r)[t] -= s;
                    }
                }
                add_into(&mut grads[logits.0], gl);
            }
            Op::Huber { pred, targets, count } => {
                let s = g.item() / (*count).max(1) as f64;
                let p = val(*pred);
                let gp = p
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&pv, t)| t.map_or(0.0, |t| s * huber_grad(pv - t)))
                    .collect();
                add_into(&mut grads[pred.0], Tensor::column(gp));
            }
            Op::Sum(x) => {
                let [r, c] = val(*x).shape();
                add_into(&mut grads[x.0], Tensor::filled(r, c, g.item()));
            }
            Op::Mean(x) => {
                let [r, c] = val(*x).shape();
                add_into(&mut grads[x.0], Tensor::filled(r, c, g.item() / (r * c) as f64));
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).unwrap()
}

/// Piecewise duration loss: quadratic below unit error, linear above.
pub fn huber_value(e: f64) -> f64 {
    if e.abs() < 1.0 {
        e * e
    } else {
        e.abs() - 0.5
    }
}

fn huber_grad(e: f64) -> f64 {
    if e.abs() < 1.0 {
        2.0 * e
    } else {
        e.signum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_and_masked() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::filled(1, 4, 0.3));
        let y = t.softmax(x, Axis::Rows, None);
        assert!(t.value(y).data().iter().all(|&p| (p - 0.25).abs() < 1e-15));

        let x = t.constant(Tensor::row_vector(vec![1.0, 5.0, -2.0, 0.0]));
        let y = t.softmax(x, Axis::Rows, Some(&[false, false, true, false]));
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn softmax_columns() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(2, 2, vec![0.0, 1.0, 0.0, 3.0]).unwrap());
        let y = t.softmax(x, Axis::Cols, None);
        let v = t.value(y);
        assert!((v.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((v.get(0, 1) + v.get(1, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn leaky_relu_negative_slope() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row_vector(vec![-1.0, 2.0]));
        let y = t.leaky_relu(x, 0.01);
        assert_eq!(t.value(y).data(), &[-0.01, 2.0]);
    }

    #[test]
    fn huber_pieces() {
        assert_eq!(huber_value(0.5), 0.25);
        assert_eq!(huber_value(-2.0), 1.5);
        assert_eq!(huber_value(0.0), 0.0);
    }

    #[test]
    fn param_leaf_is_shared() {
        let mut store = ParameterStore::new();
        let id = store.add("w", Tensor::scalar(3.0)).unwrap();
        let mut t = Tape::new();
        let a = t.param(&store, id);
        let b = t.param(&store, id);
        assert_eq!(a, b);
        let y = t.mul(a, b);
        t.backward(y, &mut store);
        assert_eq!(store.grad(id).item(), 6.0);
    }

    #[test]
    fn cross_entropy_of_confident_logits_is_near_zero() {
        let mut store = ParameterStore::new();
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(2, 3, vec![100.0, 0.0, 0.0, 0.0, 0.0, 100.0]).unwrap());
        let l = t.cross_entropy(x, vec![Some(0), Some(2)]);
        assert!(t.value(l).item() < 1e-40);
        t.backward(l, &mut store);
    }
}
