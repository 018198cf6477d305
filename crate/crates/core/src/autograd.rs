//! Reverse-mode differentiation over a linear tape of matrix operations.
//!
//! A [`Tape`] borrows the parameter tensors of a model for the duration of
//! one forward/backward pass. Parameters are referenced by index; those
//! marked frozen never receive a gradient and the backward sweep skips any
//! sub-graph that does not depend on a trainable parameter.

use crate::tensor::{gemm, log_sum_exp, matmul, matmul_nt, matmul_tn, softmax_in_place, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Constant,
    Param(usize),
    /// `x · wᵀ + b`, with `w` stored as (out × in).
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Element-wise product with a constant mask (dropout).
    Mask(NodeId, Matrix),
    Gather { table: NodeId, ids: Vec<usize> },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Matrix, inv_std: Vec<f64> },
    Gelu(NodeId),
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, probs: Vec<Matrix> },
    ConcatRows(Vec<NodeId>),
    /// Σ weight · (−log softmax(logits[row])[token]) as a 1×1 value.
    WeightedNll { logits: NodeId, targets: Vec<NllTarget>, probs: Vec<Vec<f64>> },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NllTarget {
    pub row: usize,
    pub token: usize,
    pub weight: f64,
}

struct Node {
    value: Option<Matrix>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: &'p [Matrix],
    trainable: &'p [bool],
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

/// Gradients aligned with the parameter list; `None` for frozen or unused parameters.
pub type ParamGrads = Vec<Option<Matrix>>;

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Matrix], trainable: &'p [bool]) -> Self {
        assert_eq!(params.len(), trainable.len());
        Self { params, trainable, nodes: Vec::new(), param_nodes: vec![None; params.len()] }
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => &self.params[*p],
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value: Some(value), op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    pub fn param(&mut self, index: usize) -> NodeId {
        if let Some(id) = self.param_nodes[index] {
            return id;
        }
        self.nodes.push(Node { value: None, op: Op::Param(index), needs_grad: self.trainable[index] });
        let id = NodeId(self.nodes.len() - 1);
        self.param_nodes[index] = Some(id);
        id
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let mut out = matmul_nt(self.value(x), self.value(w));
        if let Some(b) = b {
            let bias = self.value(b);
            assert_eq!(bias.len(), out.cols(), "bias width mismatch");
            for r in 0..out.rows() {
                for (o, bv) in out.row_mut(r).iter_mut().zip(bias.data()) {
                    *o += bv;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(out, Op::Linear { x, w, b }, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), needs)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let out = self.value(a).scaled(s);
        let needs = self.needs(a);
        self.push(out, Op::Scale(a, s), needs)
    }

    pub fn mask(&mut self, a: NodeId, mask: Matrix) -> NodeId {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), mask.shape());
        for (o, m) in out.data_mut().iter_mut().zip(mask.data()) {
            *o *= m;
        }
        let needs = self.needs(a);
        self.push(out, Op::Mask(a, mask), needs)
    }

    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        let needs = self.needs(table);
        self.push(out, Op::Gather { table, ids: ids.to_vec() }, needs)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let mut xhat = Matrix::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let (mean, istd) = layer_norm_stats(xv.row(r));
            for (h, v) in xhat.row_mut(r).iter_mut().zip(xv.row(r)) {
                *h = (v - mean) * istd;
            }
            inv_std.push(istd);
        }
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut out = xhat.clone();
        for r in 0..n {
            for ((o, gv), bv) in out.row_mut(r).iter_mut().zip(g.data()).zip(b.data()) {
                *o = *o * gv + bv;
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, needs)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = gelu(*v);
        }
        let needs = self.needs(x);
        self.push(out, Op::Gelu(x), needs)
    }

    /// Multi-head scaled dot-product attention. With `causal`, query row `i`
    /// attends to key rows `0..=i` (requires equal query and key lengths).
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, causal: bool) -> NodeId {
        let (out, probs) = attention_forward(self.value(q), self.value(k), self.value(v), heads, causal);
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(out, Op::Attention { q, k, v, heads, probs }, needs)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let mut out = Matrix::zeros(0, 0);
        for &p in parts {
            out.append_rows(self.value(p));
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), needs)
    }

    pub fn weighted_nll(&mut self, logits: NodeId, targets: Vec<NllTarget>) -> NodeId {
        let lv = self.value(logits);
        let mut total = 0.0;
        let mut probs = Vec::with_capacity(targets.len());
        for t in &targets {
            let row = lv.row(t.row);
            total += t.weight * (log_sum_exp(row) - row[t.token]);
            let mut p = row.to_vec();
            softmax_in_place(&mut p);
            probs.push(p);
        }
        let needs = self.needs(logits);
        self.push(Matrix::scalar(total), Op::WeightedNll { logits, targets, probs }, needs)
    }

    /// Back-propagates from a 1×1 `root` and returns per-parameter gradients.
    pub fn backward(self, root: NodeId) -> ParamGrads {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(1.0));
        let mut out: ParamGrads = vec![None; self.params.len()];

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(p) => out[*p] = Some(g),
                Op::Linear { x, w, b } => {
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, matmul(&g, self.value(*w)));
                    }
                    if self.needs(*w) {
                        accumulate(&mut grads, *w, matmul_tn(&g, self.value(*x)));
                    }
                    if let Some(b) = b {
                        if self.needs(*b) {
                            let mut gb = Matrix::zeros(1, g.cols());
                            for r in 0..g.rows() {
                                for (s, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                                    *s += v;
                                }
                            }
                            let shape = self.value(*b).shape();
                            accumulate(&mut grads, *b, Matrix::from_vec(shape.0, shape.1, gb.into_vec()));
                        }
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scaled(*s)),
                Op::Mask(a, mask) => {
                    let mut ga = g;
                    for (v, m) in ga.data_mut().iter_mut().zip(mask.data()) {
                        *v *= m;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gather { table, ids } => {
                    let shape = self.value(*table).shape();
                    let mut gt = Matrix::zeros(shape.0, shape.1);
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, s) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let gv = self.value(*gamma);
                    let (n, d) = xhat.shape();
                    if self.needs(*gamma) || self.needs(*beta) {
                        let mut gg = vec![0.0; d];
                        let mut gb = vec![0.0; d];
                        for r in 0..n {
                            for c in 0..d {
                                gg[c] += g.get(r, c) * xhat.get(r, c);
                                gb[c] += g.get(r, c);
                            }
                        }
                        if self.needs(*gamma) {
                            let s = gv.shape();
                            accumulate(&mut grads, *gamma, Matrix::from_vec(s.0, s.1, gg));
                        }
                        if self.needs(*beta) {
                            let s = self.value(*beta).shape();
                            accumulate(&mut grads, *beta, Matrix::from_vec(s.0, s.1, gb));
                        }
                    }
                    if self.needs(*x) {
                        let mut gx = Matrix::zeros(n, d);
                        for r in 0..n {
                            let dxhat: Vec<f64> = (0..d).map(|c| g.get(r, c) * gv.data()[c]).collect();
                            let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                            let mean_dx = dxhat.iter().zip(xhat.row(r)).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                            for c in 0..d {
                                gx.set(r, c, inv_std[r] * (dxhat[c] - mean_d - xhat.get(r, c) * mean_dx));
                            }
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for (gv, v) in gx.data_mut().iter_mut().zip(xv.data()) {
                        *gv *= gelu_grad(*v);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (gq, gk, gv) = attention_backward(&g, self.value(*q), self.value(*k), self.value(*v), *heads, probs);
                    if self.needs(*q) {
                        accumulate(&mut grads, *q, gq);
                    }
                    if self.needs(*k) {
                        accumulate(&mut grads, *k, gk);
                    }
                    if self.needs(*v) {
                        accumulate(&mut grads, *v, gv);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        if self.needs(p) {
                            accumulate(&mut grads, p, g.rows_slice(start, start + rows));
                        }
                        start += rows;
                    }
                }
                Op::WeightedNll { logits, targets, probs } => {
                    let upstream = g.item();
                    let shape = self.value(*logits).shape();
                    let mut gl = Matrix::zeros(shape.0, shape.1);
                    for (t, p) in targets.iter().zip(probs) {
                        let row = gl.row_mut(t.row);
                        for (r, pv) in row.iter_mut().zip(p) {
                            *r += upstream * t.weight * pv;
                        }
                        row[t.token] -= upstream * t.weight;
                    }
                    accumulate(&mut grads, *logits, gl);
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn layer_norm_stats(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

/// Plain layer normalisation, shared with the inference path.
pub(crate) fn layer_norm_rows(x: &Matrix, gamma: &Matrix, beta: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let (mean, istd) = layer_norm_stats(x.row(r));
        for ((o, g), b) in out.row_mut(r).iter_mut().zip(gamma.data()).zip(beta.data()) {
            *o = (*o - mean) * istd * g + b;
        }
    }
    out
}

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Returns the attention output and the per-head probability matrices.
///
/// With `causal`, query row `i` sees key rows `0..=i + (keys - queries)`, so a
/// block of new queries can attend over a cached prefix.
pub(crate) fn attention_forward(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize, causal: bool) -> (Matrix, Vec<Matrix>) {
    let (n, d) = q.shape();
    let m = k.rows();
    assert_eq!(d % heads, 0, "width not divisible by heads");
    assert!(!causal || m >= n, "causal attention needs at least as many keys as queries");
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let offset = m - n.min(m);
    let mut out = Matrix::zeros(n, d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.column_block(h * dh, dh);
        let kh = k.column_block(h * dh, dh);
        let vh = v.column_block(h * dh, dh);
        let mut s = matmul_nt(&qh, &kh);
        for i in 0..n {
            let row = s.row_mut(i);
            let limit = if causal { i + offset + 1 } else { m };
            for (j, x) in row.iter_mut().enumerate() {
                if j < limit {
                    *x *= scale;
                } else {
                    *x = f64::NEG_INFINITY;
                }
            }
            softmax_in_place(row);
        }
        let oh = matmul(&s, &vh);
        out.add_column_block(h * dh, &oh);
        probs.push(s);
    }
    (out, probs)
}

fn attention_backward(g: &Matrix, q: &Matrix, k: &Matrix, v: &Matrix, heads: usize, probs: &[Matrix]) -> (Matrix, Matrix, Matrix) {
    let (n, d) = q.shape();
    let m = k.rows();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = Matrix::zeros(n, d);
    let mut gk = Matrix::zeros(m, d);
    let mut gv = Matrix::zeros(m, d);
    for (h, p) in probs.iter().enumerate() {
        let gh = g.column_block(h * dh, dh);
        let qh = q.column_block(h * dh, dh);
        let kh = k.column_block(h * dh, dh);
        let vh = v.column_block(h * dh, dh);
        gv.add_column_block(h * dh, &matmul_tn(p, &gh));
        let gp = matmul_nt(&gh, &vh);
        let mut gs = Matrix::zeros(n, m);
        for i in 0..n {
            let pr = p.row(i);
            let gpr = gp.row(i);
            let dot: f64 = pr.iter().zip(gpr).map(|(a, b)| a * b).sum();
            for (j, o) in gs.row_mut(i).iter_mut().enumerate() {
                *o = pr[j] * (gpr[j] - dot) * scale;
            }
        }
        let mut gqh = Matrix::zeros(n, dh);
        gemm(1.0, &gs, false, &kh, false, 0.0, &mut gqh);
        gq.add_column_block(h * dh, &gqh);
        gk.add_column_block(h * dh, &matmul_tn(&gs, &qh));
    }
    (gq, gk, gv)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences over every entry of every parameter.
    fn check(params: Vec<Matrix>, f: impl Fn(&mut Tape) -> NodeId) {
        let trainable = vec![true; params.len()];
        let mut tape = Tape::new(&params, &trainable);
        let root = f(&mut tape);
        let grads = tape.backward(root);
        let eps = 1e-6;
        for p in 0..params.len() {
            for i in 0..params[p].len() {
                let mut plus = params.clone();
                plus[p].data_mut()[i] += eps;
                let mut minus = params.clone();
                minus[p].data_mut()[i] -= eps;
                let fp = {
                    let mut t = Tape::new(&plus, &trainable);
                    let r = f(&mut t);
                    t.value(r).item()
                };
                let fm = {
                    let mut t = Tape::new(&minus, &trainable);
                    let r = f(&mut t);
                    t.value(r).item()
                };
                let numeric = (fp - fm) / (2.0 * eps);
                let analytic = grads[p].as_ref().map_or(0.0, |g| g.data()[i]);
                let denom = numeric.abs().max(analytic.abs()).max(1e-8);
                assert!(
                    (numeric - analytic).abs() / denom < 1e-5 || (numeric - analytic).abs() < 1e-9,
                    "param {p} entry {i}: numeric {numeric} analytic {analytic}"
                );
            }
        }
    }

    fn m(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut s = seed;
        Matrix::from_fn(rows, cols, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        })
    }

    fn sum_nll(t: &mut Tape, x: NodeId) -> NodeId {
        let rows = t.value(x).rows();
        let cols = t.value(x).cols();
        let targets = (0..rows).map(|r| NllTarget { row: r, token: r % cols, weight: 0.7 }).collect();
        t.weighted_nll(x, targets)
    }

    #[test]
    fn linear_layer_norm_gelu_gradients() {
        check(vec![m(3, 4, 1), m(5, 4, 2), m(1, 5, 3), m(1, 5, 4), m(1, 5, 5)], |t| {
            let x = t.param(0);
            let w = t.param(1);
            let b = t.param(2);
            let y = t.linear(x, w, Some(b));
            let g = t.param(3);
            let be = t.param(4);
            let y = t.layer_norm(y, g, be);
            let y = t.gelu(y);
            sum_nll(t, y)
        });
    }

    #[test]
    fn attention_gradients_causal_and_full() {
        for causal in [true, false] {
            let kv_rows = if causal { 4 } else { 6 };
            check(vec![m(4, 6, 7), m(kv_rows, 6, 8), m(kv_rows, 6, 9)], move |t| {
                let q = t.param(0);
                let k = t.param(1);
                let v = t.param(2);
                let y = t.attention(q, k, v, 2, causal);
                sum_nll(t, y)
            });
        }
    }

    #[test]
    fn gather_concat_mask_scale_gradients() {
        check(vec![m(5, 3, 11), m(2, 3, 12)], |t| {
            let table = t.param(0);
            let a = t.gather(table, &[0, 3, 3, 1]);
            let b = t.param(1);
            let c = t.concat_rows(&[a, b]);
            let mask = Matrix::from_fn(6, 3, |r, c| if (r + c) % 3 == 0 { 0.0 } else { 1.5 });
            let c = t.mask(c, mask);
            let c = t.scale(c, -0.3);
            let d = t.add(c, c);
            sum_nll(t, d)
        });
    }

    #[test]
    fn frozen_parameters_receive_no_gradient() {
        let params = vec![m(2, 3, 1), m(4, 3, 2)];
        let trainable = vec![false, true];
        let mut t = Tape::new(&params, &trainable);
        let x = t.param(0);
        let w = t.param(1);
        let y = t.linear(x, w, None);
        let r = sum_nll(&mut t, y);
        let g = t.backward(r);
        assert!(g[0].is_none());
        assert!(g[1].is_some());
    }

    #[test]
    fn causal_attention_ignores_future_rows() {
        let q = m(4, 4, 1);
        let k = m(4, 4, 2);
        let v = m(4, 4, 3);
        let (a, _) = attention_forward(&q, &k, &v, 2, true);
        let mut v2 = v.clone();
        v2.row_mut(3).iter_mut().for_each(|x| *x += 10.0);
        let mut k2 = k.clone();
        k2.row_mut(3).iter_mut().for_each(|x| *x -= 3.0);
        let (b, _) = attention_forward(&q, &k2, &v2, 2, true);
        for r in 0..3 {
            assert_eq!(a.row(r), b.row(r));
        }
    }
}
