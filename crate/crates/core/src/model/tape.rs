//! Reverse-mode automatic differentiation over 2-D matrices.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{axpy, dot, Matrix};
use crate::bpe::PAD_ID;

pub type NodeId = usize;
pub type ParamId = usize;

const LN_EPS: f64 = 1e-5;

/// Named trainable parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub values: Vec<Matrix>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }
}

/// Per-parameter gradients; `None` means zero.
#[derive(Debug, Clone, Default)]
pub struct Gradients(pub Vec<Option<Matrix>>);

impl Gradients {
    pub fn empty(n: usize) -> Self {
        Gradients(vec![None; n])
    }

    pub fn accumulate(&mut self, other: Gradients) {
        for (mine, theirs) in self.0.iter_mut().zip(other.0) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.add_assign(&t),
                    None => *mine = Some(t),
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.0.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .flat_map(|g| g.data.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    Gather { table: NodeId, ids: Vec<usize> },
    MatMul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Dropout { x: NodeId, mask: Vec<f64> },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Matrix, inv_std: Vec<f64> },
    Attention(Box<AttnCache>),
    SmoothedNll { logits: NodeId, gold: Vec<u32>, eps: f64, probs: Matrix },
}

struct AttnCache {
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
    causal: bool,
    /// Softmax weights, `heads × n × m`.
    probs: Vec<f64>,
    /// Scaled keep-mask over `probs` when attention dropout is active.
    drop: Option<Vec<f64>>,
}

struct Node {
    value: Option<Matrix>,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation so that it can be differentiated.
///
/// Dropout is active only when the tape was created with an RNG.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
    rng: Option<ChaCha8Rng>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
            rng: None,
        }
    }

    pub fn training(params: &'p ParamStore, rng: ChaCha8Rng) -> Self {
        let mut t = Tape::new(params);
        t.rng = Some(rng);
        t
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after `mark`.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
        for p in self.param_nodes.iter_mut() {
            if p.is_some_and(|id| id >= mark) {
                *p = None;
            }
        }
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        let node = &self.nodes[id];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.params.get(*p),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, p: ParamId) -> NodeId {
        if let Some(id) = self.param_nodes[p] {
            return id;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(p),
            needs_grad: true,
        });
        let id = self.nodes.len() - 1;
        self.param_nodes[p] = Some(id);
        id
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols);
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        let ng = self.needs(table);
        self.push(out, Op::Gather { table, ids: ids.to_vec() }, ng)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// Adds the single-row `bias` to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        let b = self.value(bias);
        assert_eq!((b.rows, b.cols), (1, out.cols), "bias shape");
        for r in 0..out.rows {
            axpy(1.0, &b.data, out.row_mut(r));
        }
        let ng = self.needs(x) || self.needs(bias);
        self.push(out, Op::AddRow(x, bias), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add shape");
        out.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let mut out = self.value(x).clone();
        out.scale_assign(s);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = v.max(0.0));
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), ng)
    }

    /// Inverted dropout; identity when not training or `p == 0`.
    pub fn dropout(&mut self, x: NodeId, p: f64) -> NodeId {
        let n = self.value(x).len();
        let Some(rng) = self.rng.as_mut().filter(|_| p > 0.0) else {
            return x;
        };
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let mut out = self.value(x).clone();
        for (o, m) in out.data.iter_mut().zip(&mask) {
            *o *= m;
        }
        let ng = self.needs(x);
        self.push(out, Op::Dropout { x, mask }, ng)
    }

    /// Row-wise layer normalization with learned `gain` and `bias` rows.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let mut xhat = Matrix::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (h, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let g = self.value(gain);
        let b = self.value(bias);
        let mut out = xhat.clone();
        for r in 0..n {
            for ((o, gi), bi) in out.row_mut(r).iter_mut().zip(&g.data).zip(&b.data) {
                *o = *o * gi + bi;
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Multi-head scaled dot-product attention of `q` over `k`/`v` (already projected).
    ///
    /// With `causal`, query row `i` only sees key rows `0..=i`.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, causal: bool, p_drop: f64) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.shape();
        let m = kv.rows;
        assert_eq!(kv.cols, d, "key width");
        assert_eq!(vv.shape(), (m, d), "value shape");
        assert_eq!(d % heads, 0, "heads must divide width");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * n * m];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let qi = &qv.row(i)[off..off + dh];
                let lim = if causal { (i + 1).min(m) } else { m };
                let prow = &mut probs[(h * n + i) * m..(h * n + i + 1) * m];
                let mut mx = f64::NEG_INFINITY;
                for (j, p) in prow[..lim].iter_mut().enumerate() {
                    *p = dot(qi, &kv.row(j)[off..off + dh]) * scale;
                    mx = mx.max(*p);
                }
                let mut sum = 0.0;
                for p in prow[..lim].iter_mut() {
                    *p = (*p - mx).exp();
                    sum += *p;
                }
                for p in prow[..lim].iter_mut() {
                    *p /= sum;
                }
            }
        }
        let drop = match self.rng.as_mut() {
            Some(rng) if p_drop > 0.0 => {
                let keep = 1.0 / (1.0 - p_drop);
                Some(
                    (0..probs.len())
                        .map(|_| if rng.gen::<f64>() < p_drop { 0.0 } else { keep })
                        .collect::<Vec<_>>(),
                )
            }
            _ => None,
        };
        let vv = self.value(v);
        let mut out = Matrix::zeros(n, d);
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let base = (h * n + i) * m;
                let orow = &mut out.data[i * d + off..i * d + off + dh];
                for j in 0..m {
                    let mut w = probs[base + j];
                    if let Some(dm) = &drop {
                        w *= dm[base + j];
                    }
                    if w != 0.0 {
                        axpy(w, &vv.row(j)[off..off + dh], orow);
                    }
                }
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            out,
            Op::Attention(Box::new(AttnCache {
                q,
                k,
                v,
                heads,
                causal,
                probs,
                drop,
            })),
            ng,
        )
    }

    /// Sum over non-pad rows of the label-smoothed cross entropy of `logits` (1×1).
    pub fn smoothed_nll(&mut self, logits: NodeId, gold: &[u32], eps: f64) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.rows, gold.len(), "one gold id per logits row");
        let vocab = lv.cols;
        let mut probs = Matrix::zeros(lv.rows, vocab);
        let mut total = 0.0;
        for (r, &g) in gold.iter().enumerate() {
            if g == PAD_ID {
                continue;
            }
            let row = lv.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            let mut loss = 0.0;
            let off = smooth_off(eps, vocab);
            for (v, (x, p)) in row.iter().zip(probs.row_mut(r)).enumerate() {
                let lp = x - lse;
                *p = lp.exp();
                let q = if v == g as usize { 1.0 - eps } else { off };
                loss -= q * lp;
            }
            total += loss;
        }
        let ng = self.needs(logits);
        self.push(
            Matrix::filled(1, 1, total),
            Op::SmoothedNll {
                logits,
                gold: gold.to_vec(),
                eps,
                probs,
            },
            ng,
        )
    }

    /// Gradients of the sum of `root`'s entries with respect to every parameter.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(root + 1);
        grads.resize_with(root + 1, || None);
        let rv = self.value(root);
        grads[root] = Some(Matrix::filled(rv.rows, rv.cols, 1.0));
        let mut out = Gradients::empty(self.params.len());

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Param(p) => match &mut out.0[*p] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                },
                Op::Gather { table, ids } => {
                    if self.needs(*table) {
                        let t = self.value(*table);
                        let mut dt = Matrix::zeros(t.rows, t.cols);
                        for (r, &i) in ids.iter().enumerate() {
                            axpy(1.0, g.row(r), dt.row_mut(i));
                        }
                        acc(&mut grads, *table, dt);
                    }
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        acc(&mut grads, *a, g.matmul_t(self.value(*b)));
                    }
                    if self.needs(*b) {
                        acc(&mut grads, *b, self.value(*a).t_matmul(&g));
                    }
                }
                Op::AddRow(x, bias) => {
                    if self.needs(*bias) {
                        let mut db = Matrix::zeros(1, g.cols);
                        for r in 0..g.rows {
                            axpy(1.0, g.row(r), &mut db.data);
                        }
                        acc(&mut grads, *bias, db);
                    }
                    if self.needs(*x) {
                        acc(&mut grads, *x, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) && self.needs(*b) {
                        acc(&mut grads, *a, g.clone());
                        acc(&mut grads, *b, g);
                    } else if self.needs(*a) {
                        acc(&mut grads, *a, g);
                    } else if self.needs(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Scale(x, s) => {
                    let mut g = g;
                    g.scale_assign(*s);
                    acc(&mut grads, *x, g);
                }
                Op::Relu(x) => {
                    let mut g = g;
                    for (gi, xi) in g.data.iter_mut().zip(&self.value(*x).data) {
                        if *xi <= 0.0 {
                            *gi = 0.0;
                        }
                    }
                    acc(&mut grads, *x, g);
                }
                Op::Dropout { x, mask } => {
                    let mut g = g;
                    for (gi, m) in g.data.iter_mut().zip(mask) {
                        *gi *= m;
                    }
                    acc(&mut grads, *x, g);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (n, d) = g.shape();
                    if self.needs(*gain) {
                        let mut dg = Matrix::zeros(1, d);
                        for r in 0..n {
                            for ((o, gi), hi) in dg.data.iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                                *o += gi * hi;
                            }
                        }
                        acc(&mut grads, *gain, dg);
                    }
                    if self.needs(*bias) {
                        let mut db = Matrix::zeros(1, d);
                        for r in 0..n {
                            axpy(1.0, g.row(r), &mut db.data);
                        }
                        acc(&mut grads, *bias, db);
                    }
                    if self.needs(*x) {
                        let gv = self.value(*gain);
                        let mut dx = Matrix::zeros(n, d);
                        let mut dxhat = vec![0.0; d];
                        for r in 0..n {
                            for ((dh, gi), wi) in dxhat.iter_mut().zip(g.row(r)).zip(&gv.data) {
                                *dh = gi * wi;
                            }
                            let h = xhat.row(r);
                            let sum: f64 = dxhat.iter().sum();
                            let sum_h = dot(&dxhat, h);
                            let k = inv_std[r] / d as f64;
                            for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                                *o = k * (d as f64 * dxhat[j] - sum - h[j] * sum_h);
                            }
                        }
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::Attention(c) => self.attention_backward(c, &g, &mut grads),
                Op::SmoothedNll {
                    logits,
                    gold,
                    eps,
                    probs,
                } => {
                    let scale = g.data[0];
                    let vocab = probs.cols;
                    let off = smooth_off(*eps, vocab);
                    let mut dl = Matrix::zeros(probs.rows, vocab);
                    for (r, &gid) in gold.iter().enumerate() {
                        if gid == PAD_ID {
                            continue;
                        }
                        for (v, (o, p)) in dl.row_mut(r).iter_mut().zip(probs.row(r)).enumerate() {
                            let q = if v == gid as usize { 1.0 - eps } else { off };
                            *o = scale * (p - q);
                        }
                    }
                    acc(&mut grads, *logits, dl);
                }
            }
        }
        out
    }

    fn attention_backward(&self, c: &AttnCache, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let (qv, kv, vv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let (n, d) = qv.shape();
        let m = kv.rows;
        let dh = d / c.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(m, d);
        let mut dv = Matrix::zeros(m, d);
        let mut dp = vec![0.0; m];
        for h in 0..c.heads {
            let off = h * dh;
            for i in 0..n {
                let base = (h * n + i) * m;
                let lim = if c.causal { (i + 1).min(m) } else { m };
                let go = &g.row(i)[off..off + dh];
                for j in 0..lim {
                    let dm = c.drop.as_ref().map_or(1.0, |dm| dm[base + j]);
                    let w = c.probs[base + j] * dm;
                    if w != 0.0 {
                        axpy(w, go, &mut dv.data[j * d + off..j * d + off + dh]);
                    }
                    dp[j] = if dm == 0.0 { 0.0 } else { dot(go, &vv.row(j)[off..off + dh]) * dm };
                }
                let p = &c.probs[base..base + lim];
                let s: f64 = p.iter().zip(&dp[..lim]).map(|(a, b)| a * b).sum();
                let qi = &qv.row(i)[off..off + dh];
                for j in 0..lim {
                    let ds = p[j] * (dp[j] - s) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    axpy(ds, &kv.row(j)[off..off + dh], &mut dq.data[i * d + off..i * d + off + dh]);
                    axpy(ds, qi, &mut dk.data[j * d + off..j * d + off + dh]);
                }
            }
        }
        for (id, m) in [(c.q, dq), (c.k, dk), (c.v, dv)] {
            if self.needs(id) {
                acc(grads, id, m);
            }
        }
    }
}

fn smooth_off(eps: f64, vocab: usize) -> f64 {
    if vocab > 1 {
        eps / (vocab - 1) as f64
    } else {
        0.0
    }
}

fn acc(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut grads[id] {
        Some(m) => m.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// Label-smoothed cross entropy of log-probabilities against `gold`, averaged
/// over non-pad positions. The smoothed target puts `1 - eps` on the gold id
/// and `eps / (V - 1)` on every other id.
pub fn smoothed_nll(log_probs: &Matrix, gold: &[u32], eps: f64) -> f64 {
    assert_eq!(log_probs.rows, gold.len(), "one gold id per row");
    let off = smooth_off(eps, log_probs.cols);
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, &g) in gold.iter().enumerate() {
        if g == PAD_ID {
            continue;
        }
        count += 1;
        for (v, lp) in log_probs.row(r).iter().enumerate() {
            let q = if v == g as usize { 1.0 - eps } else { off };
            if q != 0.0 {
                total -= q * lp;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
