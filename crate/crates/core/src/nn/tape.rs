//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records the forward computation for one album. Parameters are
//! borrowed from a [`ParamStore`] rather than copied; their gradients are
//! collected into a [`GradientSet`] after [`Tape::backward`].

use super::matrix::{dot, Matrix};
use super::params::{GradientSet, ParamStore};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Param(usize),
    Input,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Relu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Matrix,
        rstd: Vec<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<Matrix>,
    },
    GatherRows(NodeId, Vec<usize>),
    ConcatRows(NodeId, NodeId),
    Dropout(NodeId, Vec<f64>),
    CrossEntropy {
        logits: NodeId,
        probs: Matrix,
        targets: Vec<usize>,
        weight: f64,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    // `None` for parameter leaves, whose value lives in the store.
    value: Option<Matrix>,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

/// Per-node gradients of a scalar root.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => &self.params.blocks[*p].value,
            (None, _) => unreachable!("non-parameter node without value"),
        }
    }

    fn push(&mut self, op: Op, value: Option<Matrix>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, block: usize) -> NodeId {
        self.push(Op::Param(block), None)
    }

    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Input, Some(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), Some(v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(Op::Add(a, b), Some(v))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        let r = self.value(row);
        assert_eq!((1, v.cols), r.shape(), "add_row shape");
        for i in 0..v.rows {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r.data) {
                *x += b;
            }
        }
        self.push(Op::AddRow(a, row), Some(v))
    }

    /// `x · w + b`
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x = x.max(0.0));
        self.push(Op::Relu(a), Some(v))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for i in 0..rows {
            let r = xv.row(i);
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (h, v) in xhat.row_mut(i).iter_mut().zip(r) {
                *h = (v - mean) * s;
            }
            rstd.push(s);
        }
        let g = self.value(gain);
        let b = self.value(bias);
        let mut out = xhat.clone();
        for i in 0..rows {
            for ((o, gv), bv) in out.row_mut(i).iter_mut().zip(&g.data).zip(&b.data) {
                *o = *o * gv + bv;
            }
        }
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            Some(out),
        )
    }

    /// Scaled dot-product attention split across `heads` column groups.
    /// With `causal`, query `i` attends only to keys `0..=i`.
    #[allow(clippy::needless_range_loop)]
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        causal: bool,
    ) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.shape();
        let m = kv.rows;
        assert_eq!(kv.cols, d, "key width");
        assert_eq!(vv.shape(), (m, d), "value shape");
        assert_eq!(d % heads, 0, "heads must divide width");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(n, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let mut p = Matrix::zeros(n, m);
            for i in 0..n {
                let qi = &qv.row(i)[cols.clone()];
                let limit = if causal { (i + 1).min(m) } else { m };
                let row = p.row_mut(i);
                let mut max = f64::NEG_INFINITY;
                for j in 0..limit {
                    let s = dot(qi, &kv.row(j)[cols.clone()]) * scale;
                    row[j] = s;
                    max = max.max(s);
                }
                let mut sum = 0.0;
                for r in row.iter_mut().take(limit) {
                    *r = (*r - max).exp();
                    sum += *r;
                }
                for r in row.iter_mut().take(limit) {
                    *r /= sum;
                }
                let out_row = &mut out.data[i * d + h * dh..i * d + (h + 1) * dh];
                for (j, &pij) in row.iter().enumerate().take(limit) {
                    for (o, vv) in out_row.iter_mut().zip(&vv.row(j)[cols.clone()]) {
                        *o += pij * vv;
                    }
                }
            }
            probs.push(p);
        }
        self.push(
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            Some(out),
        )
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let xv = self.value(x);
        let mut out = Matrix::zeros(idx.len(), xv.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(xv.row(i));
        }
        self.push(Op::GatherRows(x, idx.to_vec()), Some(out))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.cols, "concat width");
        let mut data = av.data.clone();
        data.extend_from_slice(&bv.data);
        let out = Matrix::from_vec(av.rows + bv.rows, av.cols, data);
        self.push(Op::ConcatRows(a, b), Some(out))
    }

    /// Inverted dropout; `mask` holds 0 or 1/(1-p) per entry.
    pub fn dropout(&mut self, x: NodeId, mask: Vec<f64>) -> NodeId {
        let mut v = self.value(x).clone();
        assert_eq!(v.data.len(), mask.len(), "dropout mask length");
        for (a, m) in v.data.iter_mut().zip(&mask) {
            *a *= m;
        }
        self.push(Op::Dropout(x, mask), Some(v))
    }

    /// `weight × mean_t −log softmax(logits[t])[targets[t]]` where masked
    /// entries (`-inf` logits) get probability exactly zero.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], weight: f64) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len(), "one target per step");
        let probs = masked_softmax_rows(lv);
        let mut loss = 0.0;
        for (t, &y) in targets.iter().enumerate() {
            loss -= probs.get(t, y).ln();
        }
        loss *= weight / targets.len() as f64;
        self.push(
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                weight,
            },
            Some(Matrix::from_vec(1, 1, vec![loss])),
        )
    }

    /// Adds `mask_value` (use `-inf`) to the selected `(row, col)` entries.
    /// The mask is a constant, so gradients pass through unchanged.
    pub fn mask(&mut self, x: NodeId, masked: &[(usize, usize)]) -> NodeId {
        let mut m = Matrix::zeros(self.value(x).rows, self.value(x).cols);
        for &(r, c) in masked {
            m.data[r * m.cols + c] = f64::NEG_INFINITY;
        }
        let mask = self.input(m);
        self.add(x, mask)
    }

    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(self.value(root).shape(), (1, 1), "backward from a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::from_vec(1, 1, vec![1.0]));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    #[allow(clippy::needless_range_loop)]
    fn backprop_node(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let acc = |grads: &mut [Option<Matrix>], id: NodeId, delta: Matrix| match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match &self.nodes[idx].op {
            Op::Param(_) | Op::Input => {}
            Op::MatMul(a, b) => {
                let da = g.matmul_t(self.value(*b));
                let db = self.value(*a).t_matmul(g);
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                let mut dr = Matrix::zeros(1, g.cols);
                for i in 0..g.rows {
                    for (d, v) in dr.data.iter_mut().zip(g.row(i)) {
                        *d += v;
                    }
                }
                acc(grads, *a, g.clone());
                acc(grads, *row, dr);
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                let out = self.nodes[idx].value.as_ref().expect("relu value");
                for (dv, o) in d.data.iter_mut().zip(&out.data) {
                    if *o <= 0.0 {
                        *dv = 0.0;
                    }
                }
                acc(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain);
                let (rows, cols) = g.shape();
                let mut dgain = Matrix::zeros(1, cols);
                let mut dbias = Matrix::zeros(1, cols);
                let mut dx = Matrix::zeros(rows, cols);
                let mut dxhat = vec![0.0; cols];
                for i in 0..rows {
                    let gr = g.row(i);
                    let hr = xhat.row(i);
                    for c in 0..cols {
                        dgain.data[c] += gr[c] * hr[c];
                        dbias.data[c] += gr[c];
                        dxhat[c] = gr[c] * gv.data[c];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                    let mean_dh = dot(&dxhat, hr) / cols as f64;
                    for (c, o) in dx.row_mut(i).iter_mut().enumerate() {
                        *o = rstd[i] * (dxhat[c] - mean_d - hr[c] * mean_dh);
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gain, dgain);
                acc(grads, *bias, dbias);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, d) = qv.shape();
                let m = kv.rows;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Matrix::zeros(n, d);
                let mut dk = Matrix::zeros(m, d);
                let mut dv = Matrix::zeros(m, d);
                let mut dp = vec![0.0; m];
                for (h, p) in probs.iter().enumerate() {
                    let cols = h * dh..(h + 1) * dh;
                    for i in 0..n {
                        let go = &g.row(i)[cols.clone()];
                        let pr = p.row(i);
                        let mut weighted = 0.0;
                        for j in 0..m {
                            if pr[j] == 0.0 {
                                dp[j] = 0.0;
                                continue;
                            }
                            dp[j] = dot(go, &vv.row(j)[cols.clone()]);
                            weighted += dp[j] * pr[j];
                            let dv_row = &mut dv.data[j * d + h * dh..j * d + (h + 1) * dh];
                            for (o, x) in dv_row.iter_mut().zip(go) {
                                *o += pr[j] * x;
                            }
                        }
                        let qi = &qv.row(i)[cols.clone()];
                        for j in 0..m {
                            if pr[j] == 0.0 {
                                continue;
                            }
                            let ds = pr[j] * (dp[j] - weighted) * scale;
                            let kj = &kv.row(j)[cols.clone()];
                            let dq_row = &mut dq.data[i * d + h * dh..i * d + (h + 1) * dh];
                            for (o, x) in dq_row.iter_mut().zip(kj) {
                                *o += ds * x;
                            }
                            let dk_row = &mut dk.data[j * d + h * dh..j * d + (h + 1) * dh];
                            for (o, x) in dk_row.iter_mut().zip(qi) {
                                *o += ds * x;
                            }
                        }
                    }
                }
                acc(grads, *q, dq);
                acc(grads, *k, dk);
                acc(grads, *v, dv);
            }
            Op::GatherRows(x, idx_list) => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows, xv.cols);
                for (o, &i) in idx_list.iter().enumerate() {
                    for (a, b) in dx.row_mut(i).iter_mut().zip(g.row(o)) {
                        *a += b;
                    }
                }
                acc(grads, *x, dx);
            }
            Op::ConcatRows(a, b) => {
                let ar = self.value(*a).rows;
                let cols = g.cols;
                let da = Matrix::from_vec(ar, cols, g.data[..ar * cols].to_vec());
                let db = Matrix::from_vec(g.rows - ar, cols, g.data[ar * cols..].to_vec());
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Dropout(x, mask) => {
                let mut d = g.clone();
                for (a, m) in d.data.iter_mut().zip(mask) {
                    *a *= m;
                }
                acc(grads, *x, d);
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                weight,
            } => {
                let upstream = g.data[0] * weight / targets.len() as f64;
                let mut d = probs.clone();
                for (t, &y) in targets.iter().enumerate() {
                    d.data[t * d.cols + y] -= 1.0;
                }
                // Masked entries have p == 0 and are not targets, so they stay 0.
                d.scale(upstream);
                acc(grads, *logits, d);
            }
        }
    }

    /// Sum parameter-leaf gradients into a [`GradientSet`] shaped like the store.
    pub fn param_gradients(&self, grads: &Gradients) -> GradientSet {
        let mut set = GradientSet::zeros_like(self.params);
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(p), Some(g)) = (&node.op, &grads.grads[i]) {
                set.blocks[*p].add_assign(g);
            }
        }
        set
    }
}

/// Row-wise softmax treating `-inf` entries as excluded (probability 0).
pub fn masked_softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows, logits.cols);
    for i in 0..logits.rows {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(max.is_finite(), "row {i} has no admissible entry");
        let o = out.row_mut(i);
        let mut sum = 0.0;
        for (p, &l) in o.iter_mut().zip(row) {
            if l != f64::NEG_INFINITY {
                *p = (l - max).exp();
                sum += *p;
            }
        }
        o.iter_mut().for_each(|p| *p /= sum);
    }
    out
}

/// Row-wise log-softmax; excluded entries stay `-inf`.
pub fn masked_log_softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows, logits.cols);
    for i in 0..logits.rows {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(max.is_finite(), "row {i} has no admissible entry");
        let lse = max
            + row
                .iter()
                .filter(|l| **l != f64::NEG_INFINITY)
                .map(|l| (l - max).exp())
                .sum::<f64>()
                .ln();
        for (o, &l) in out.row_mut(i).iter_mut().zip(row) {
            *o = l - lse;
        }
    }
    out
}
