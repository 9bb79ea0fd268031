//! A small reverse-mode autodiff tape over dense `f64` matrices.
//!
//! Every value is a 2-D matrix; scalars are `1 × 1`. Parameters enter the tape
//! by reference, so building a tape per sample does not copy weights.
//! Constants never receive gradients and nodes that do not depend on a
//! parameter are skipped during the backward sweep.

use std::borrow::Cow;

use ndarray::{s, Axis};

use crate::params::{Grads, Mat, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which keys a query may attend to.
#[derive(Clone, Debug)]
pub struct AttnMask {
    pub key_valid: Vec<bool>,
    /// Query `i` only sees keys `j <= i`.
    pub causal: bool,
}

impl AttnMask {
    pub fn all(keys: usize) -> Self {
        Self {
            key_valid: vec![true; keys],
            causal: false,
        }
    }

    pub fn causal(keys: usize) -> Self {
        Self {
            key_valid: vec![true; keys],
            causal: true,
        }
    }

    #[inline]
    fn allowed(&self, i: usize, j: usize) -> bool {
        self.key_valid[j] && (!self.causal || j <= i)
    }
}

enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    ConcatCols(Var, Var),
    MulConst(Var, Mat),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Mat>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Mat,
    },
    KlDiv {
        s: Var,
        o: Var,
        p_s: Mat,
        p_o: Mat,
        row_kl: Vec<f64>,
        weights: Vec<f64>,
    },
    MeanSquare(Var, Var),
}

struct Node<'a> {
    value: Cow<'a, Mat>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node<'a>>,
    param_vars: Vec<Option<Var>>,
    /// Parameters excluded from differentiation on this tape.
    frozen: Vec<bool>,
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            frozen: vec![false; store.len()],
        }
    }

    pub fn freeze(&mut self, id: ParamId) {
        self.frozen[id.0] = true;
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Mat>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(Cow::Owned(value), Op::Const, false)
    }

    pub fn constant_ref(&mut self, value: &'a Mat) -> Var {
        self.push(Cow::Borrowed(value), Op::Const, false)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.store;
        let needs = !self.frozen[id.0];
        let v = self.push(Cow::Borrowed(store.get(id)), Op::Param(id), needs);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(Cow::Owned(value), Op::MatMul(a, b), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(Cow::Owned(value), Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(Cow::Owned(value), Op::Sub(a, b), needs)
    }

    /// `a + 1·row`, broadcasting a `1 × d` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + &self.value(row).row(0);
        let needs = self.needs(a) || self.needs(row);
        self.push(Cow::Owned(value), Op::AddRow(a, row), needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let needs = self.needs(a);
        self.push(Cow::Owned(value), Op::Scale(a, c), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let needs = self.needs(a);
        self.push(Cow::Owned(value), Op::Relu(a), needs)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_cols: row counts differ");
        let needs = self.needs(a) || self.needs(b);
        self.push(Cow::Owned(value), Op::ConcatCols(a, b), needs)
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Mat) -> Var {
        let value = self.value(a) * &mask;
        let needs = self.needs(a);
        self.push(Cow::Owned(value), Op::MulConst(a, mask), needs)
    }

    /// Row-wise layer normalization with a `1 × d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let value = &xhat * &self.value(gamma).row(0) + self.value(beta).row(0);
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            Cow::Owned(value),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        )
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// queries, keys and values. Heads split the channel dimension evenly.
    /// A query row with no admissible key produces a zero output row.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &AttnMask) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (tq, d) = qv.dim();
        let tk = kv.nrows();
        assert!(d % heads == 0, "channels {d} not divisible by {heads} heads");
        assert_eq!(mask.key_valid.len(), tk, "attention mask length");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros((tq, d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = qv.slice(cols);
            let kh = kv.slice(cols);
            let vh = vv.slice(cols);
            let mut p = qh.dot(&kh.t());
            for i in 0..tq {
                let mut row = p.row_mut(i);
                let mut max = f64::NEG_INFINITY;
                for j in 0..tk {
                    if mask.allowed(i, j) {
                        row[j] *= scale;
                        max = max.max(row[j]);
                    }
                }
                if max == f64::NEG_INFINITY {
                    row.fill(0.0);
                    continue;
                }
                let mut sum = 0.0;
                for j in 0..tk {
                    if mask.allowed(i, j) {
                        row[j] = (row[j] - max).exp();
                        sum += row[j];
                    } else {
                        row[j] = 0.0;
                    }
                }
                row.mapv_inplace(|x| x / sum);
            }
            out.slice_mut(cols).assign(&p.dot(&vh));
            probs.push(p);
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            Cow::Owned(out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            needs,
        )
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut value = Mat::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).assign(&t.row(id));
        }
        let needs = self.needs(table);
        self.push(
            Cow::Owned(value),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            needs,
        )
    }

    /// Mean token cross-entropy over rows whose target is `Some`.
    /// Returns a `1 × 1` node; zero when no row counts.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len(), "cross_entropy: row count");
        let probs = softmax_rows(lv);
        let count = targets.iter().filter(|t| t.is_some()).count();
        let w = if count == 0 { 0.0 } else { 1.0 / count as f64 };
        let mut loss = 0.0;
        let mut weights = Vec::with_capacity(targets.len());
        let mut flat = Vec::with_capacity(targets.len());
        for (r, t) in targets.iter().enumerate() {
            match t {
                Some(t) => {
                    loss -= w * log_softmax_at(lv.row(r), *t);
                    weights.push(w);
                    flat.push(*t);
                }
                None => {
                    weights.push(0.0);
                    flat.push(0);
                }
            }
        }
        let needs = self.needs(logits);
        self.push(
            Cow::Owned(Mat::from_elem((1, 1), loss)),
            Op::CrossEntropy {
                logits,
                targets: flat,
                weights,
                probs,
            },
            needs,
        )
    }

    /// Mean over masked-in rows of `KL(softmax(s) ‖ softmax(o))`.
    pub fn kl_div(&mut self, s: Var, o: Var, rows: &[bool]) -> Var {
        let (sv, ov) = (self.value(s), self.value(o));
        assert_eq!(sv.dim(), ov.dim(), "kl_div: shape mismatch");
        assert_eq!(sv.nrows(), rows.len(), "kl_div: mask length");
        let ls = log_softmax_rows(sv);
        let lo = log_softmax_rows(ov);
        let p_s = ls.mapv(f64::exp);
        let p_o = lo.mapv(f64::exp);
        let count = rows.iter().filter(|&&r| r).count();
        let w = if count == 0 { 0.0 } else { 1.0 / count as f64 };
        let mut row_kl = Vec::with_capacity(rows.len());
        let mut weights = Vec::with_capacity(rows.len());
        let mut total = 0.0;
        for r in 0..rows.len() {
            let kl: f64 = (0..sv.ncols())
                .map(|x| p_s[[r, x]] * (ls[[r, x]] - lo[[r, x]]))
                .sum();
            row_kl.push(kl);
            let wr = if rows[r] { w } else { 0.0 };
            weights.push(wr);
            total += wr * kl;
        }
        let needs = self.needs(s) || self.needs(o);
        self.push(
            Cow::Owned(Mat::from_elem((1, 1), total)),
            Op::KlDiv {
                s,
                o,
                p_s,
                p_o,
                row_kl,
                weights,
            },
            needs,
        )
    }

    /// Mean squared elementwise difference.
    pub fn mean_square(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.dim(), bv.dim(), "mean_square: shape mismatch");
        let n = av.len().max(1) as f64;
        let value = av
            .iter()
            .zip(bv.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let needs = self.needs(a) || self.needs(b);
        self.push(
            Cow::Owned(Mat::from_elem((1, 1), value)),
            Op::MeanSquare(a, b),
            needs,
        )
    }

    /// Reverse sweep from a `1 × 1` node. Returns gradients of every
    /// non-frozen parameter reached by the sweep.
    pub fn backward(&self, root: Var) -> Grads {
        let mut out = Grads::new(self.store.len());
        if !self.needs(root) {
            return out;
        }
        let mut grads: Vec<Option<Mat>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Mat::ones(self.value(root).dim()));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let send = |v: Var, contrib: Mat, grads: &mut Vec<Option<Mat>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Const => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        send(*a, g.dot(&self.value(*b).t()), &mut grads);
                    }
                    if self.needs(*b) {
                        send(*b, self.value(*a).t().dot(&g), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        send(*b, g.clone(), &mut grads);
                    }
                    send(*a, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    if self.needs(*b) {
                        send(*b, -&g, &mut grads);
                    }
                    send(*a, g, &mut grads);
                }
                Op::AddRow(a, row) => {
                    if self.needs(*row) {
                        send(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)), &mut grads);
                    }
                    send(*a, g, &mut grads);
                }
                Op::Scale(a, c) => send(*a, g * *c, &mut grads),
                Op::Relu(a) => {
                    let mut g = g;
                    ndarray::Zip::from(&mut g)
                        .and(&*node.value)
                        .for_each(|gi, &y| {
                            if y <= 0.0 {
                                *gi = 0.0
                            }
                        });
                    send(*a, g, &mut grads);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).ncols();
                    if self.needs(*a) {
                        send(*a, g.slice(s![.., ..ca]).to_owned(), &mut grads);
                    }
                    if self.needs(*b) {
                        send(*b, g.slice(s![.., ca..]).to_owned(), &mut grads);
                    }
                }
                Op::MulConst(a, mask) => send(*a, g * mask, &mut grads),
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    if self.needs(*beta) {
                        send(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)), &mut grads);
                    }
                    if self.needs(*gamma) {
                        let dg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        send(*gamma, dg, &mut grads);
                    }
                    if self.needs(*x) {
                        let gam = self.value(*gamma).row(0).to_owned();
                        let dxhat = &g * &gam;
                        let d = xhat.ncols() as f64;
                        let mut dx = Mat::zeros(xhat.dim());
                        for r in 0..xhat.nrows() {
                            let dr = dxhat.row(r);
                            let xr = xhat.row(r);
                            let mean_d = dr.sum() / d;
                            let mean_dx = dr.dot(&xr) / d;
                            let is = inv_std[r];
                            for c in 0..xhat.ncols() {
                                dx[[r, c]] = is * (dr[c] - mean_d - xr[c] * mean_dx);
                            }
                        }
                        send(*x, dx, &mut grads);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.ncols();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Mat::zeros(qv.dim());
                    let mut dk = Mat::zeros(kv.dim());
                    let mut dv = Mat::zeros(vv.dim());
                    for (h, p) in probs.iter().enumerate() {
                        let cols = s![.., h * dh..(h + 1) * dh];
                        let go = g.slice(cols);
                        let vh = vv.slice(cols);
                        dv.slice_mut(cols).assign(&p.t().dot(&go));
                        let dp = go.dot(&vh.t());
                        let mut ds = p * &dp;
                        for (mut ds_row, p_row) in ds.rows_mut().into_iter().zip(p.rows()) {
                            let inner: f64 = ds_row.sum();
                            ds_row.zip_mut_with(&p_row, |x, &pi| *x -= pi * inner);
                        }
                        ds *= scale;
                        dq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                        dk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                    }
                    send(*q, dq, &mut grads);
                    send(*k, dk, &mut grads);
                    send(*v, dv, &mut grads);
                }
                Op::Gather { table, ids } => {
                    let mut dt = Mat::zeros(self.value(*table).dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = dt.row_mut(id);
                        row += &g.row(r);
                    }
                    send(*table, dt, &mut grads);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    let up = g[[0, 0]];
                    let mut dl = probs.clone();
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        let mut row = dl.row_mut(r);
                        if w == 0.0 {
                            row.fill(0.0);
                        } else {
                            row[t] -= 1.0;
                            row *= w * up;
                        }
                    }
                    send(*logits, dl, &mut grads);
                }
                Op::KlDiv {
                    s,
                    o,
                    p_s,
                    p_o,
                    row_kl,
                    weights,
                } => {
                    let up = g[[0, 0]];
                    if self.needs(*s) {
                        let ls = p_s.mapv(|p| p.max(f64::MIN_POSITIVE).ln());
                        let lo = p_o.mapv(|p| p.max(f64::MIN_POSITIVE).ln());
                        let mut ds = Mat::zeros(p_s.dim());
                        for r in 0..ds.nrows() {
                            let w = weights[r] * up;
                            if w == 0.0 {
                                continue;
                            }
                            for c in 0..ds.ncols() {
                                // d/ds of sum p_s (log p_s - log p_o)
                                ds[[r, c]] =
                                    w * p_s[[r, c]] * (ls[[r, c]] - lo[[r, c]] - row_kl[r]);
                            }
                        }
                        send(*s, ds, &mut grads);
                    }
                    if self.needs(*o) {
                        let mut dov = p_o - p_s;
                        for (r, mut row) in dov.rows_mut().into_iter().enumerate() {
                            row *= weights[r] * up;
                        }
                        send(*o, dov, &mut grads);
                    }
                }
                Op::MeanSquare(a, b) => {
                    let up = g[[0, 0]];
                    let diff = self.value(*a) - self.value(*b);
                    let n = diff.len().max(1) as f64;
                    let da = diff * (2.0 * up / n);
                    if self.needs(*b) {
                        send(*b, -&da, &mut grads);
                    }
                    send(*a, da, &mut grads);
                }
            }
        }
        out
    }
}

pub fn log_softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|x| x - lse);
    }
    out
}

pub fn softmax_rows(m: &Mat) -> Mat {
    log_softmax_rows(m).mapv(f64::exp)
}

fn log_softmax_at(row: ndarray::ArrayView1<f64>, idx: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row[idx] - lse
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central differences of `f` with respect to every entry of every parameter.
    fn check<F>(store: &mut ParamStore, f: F, tol: f64)
    where
        F: Fn(&mut Tape) -> Var,
    {
        let analytic = {
            let mut tape = Tape::new(store);
            let root = f(&mut tape);
            tape.backward(root)
        };
        let eps = 1e-5;
        for id in store.ids().collect::<Vec<_>>() {
            let (rows, cols) = store.get(id).dim();
            for r in 0..rows {
                for c in 0..cols {
                    let orig = store.get(id)[[r, c]];
                    store.get_mut(id)[[r, c]] = orig + eps;
                    let plus = {
                        let mut t = Tape::new(store);
                        let v = f(&mut t);
                        t.scalar(v)
                    };
                    store.get_mut(id)[[r, c]] = orig - eps;
                    let minus = {
                        let mut t = Tape::new(store);
                        let v = f(&mut t);
                        t.scalar(v)
                    };
                    store.get_mut(id)[[r, c]] = orig;
                    let numeric = (plus - minus) / (2.0 * eps);
                    let a = analytic.get(id).map(|g| g[[r, c]]).unwrap_or(0.0);
                    let denom = a.abs().max(numeric.abs()).max(1e-8);
                    assert!(
                        (a - numeric).abs() / denom < tol || (a - numeric).abs() < 1e-9,
                        "{}[{r},{c}]: analytic {a} numeric {numeric}",
                        store.name(id)
                    );
                }
            }
        }
    }

    #[test]
    fn grad_matmul_bias_relu_layernorm() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let x = store.insert("x", random(&mut rng, 3, 4));
        let w = store.insert("w", random(&mut rng, 4, 5));
        let b = store.insert("b", random(&mut rng, 1, 5));
        let g = store.insert("g", random(&mut rng, 1, 5));
        let be = store.insert("be", random(&mut rng, 1, 5));
        let target = random(&mut rng, 3, 5);
        check(
            &mut store,
            |t| {
                let (xv, wv, bv, gv, bev) = (t.param(x), t.param(w), t.param(b), t.param(g), t.param(be));
                let h = t.matmul(xv, wv);
                let h = t.add_row(h, bv);
                let h = t.relu(h);
                let h = t.layer_norm(h, gv, bev, 1e-5);
                let tgt = t.constant(target.clone());
                t.mean_square(h, tgt)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_attention_causal_and_padded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let q = store.insert("q", random(&mut rng, 3, 4));
        let k = store.insert("k", random(&mut rng, 4, 4));
        let v = store.insert("v", random(&mut rng, 4, 4));
        let target = random(&mut rng, 3, 4);
        let mask = AttnMask {
            key_valid: vec![true, true, false, true],
            causal: true,
        };
        check(
            &mut store,
            |t| {
                let (qv, kv, vv) = (t.param(q), t.param(k), t.param(v));
                let o = t.attention(qv, kv, vv, 2, &mask);
                let tgt = t.constant(target.clone());
                t.mean_square(o, tgt)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_losses_gather_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let table = store.insert("table", random(&mut rng, 5, 3));
        let a = store.insert("a", random(&mut rng, 4, 2));
        let ids = [1usize, 4, 4, 0];
        let targets = [Some(2), None, Some(0), Some(4)];
        check(
            &mut store,
            |t| {
                let tv = t.param(table);
                let e = t.gather(tv, &ids);
                let av = t.param(a);
                let c = t.concat_cols(e, av);
                let c = t.scale(c, 1.7);
                let ce = t.cross_entropy(c, &targets);
                let other = t.mul_const(c, Mat::from_elem((4, 5), 0.5));
                let kl = t.kl_div(c, other, &[true, false, true, true]);
                let kl2 = t.kl_div(other, c, &[true, true, true, true]);
                let s1 = t.add(ce, kl);
                t.sub(s1, kl2)
            },
            1e-6,
        );
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Mat::from_elem((1, 1), 2.0));
        let b = store.insert("b", Mat::from_elem((1, 1), 3.0));
        let mut t = Tape::new(&store);
        t.freeze(b);
        let (av, bv) = (t.param(a), t.param(b));
        let y = t.matmul(av, bv);
        let grads = t.backward(y);
        assert_eq!(grads.get(a).unwrap()[[0, 0]], 3.0);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn fully_masked_query_row_is_zero() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let q = t.constant(Mat::ones((2, 2)));
        let k = t.constant(Mat::ones((2, 2)));
        let v = t.constant(Mat::ones((2, 2)));
        let mask = AttnMask {
            key_valid: vec![false, true],
            causal: true,
        };
        let o = t.attention(q, k, v, 1, &mask);
        assert_eq!(t.value(o).row(0).to_vec(), vec![0.0, 0.0]);
        assert_eq!(t.value(o).row(1).to_vec(), vec![1.0, 1.0]);
    }
}
