//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! borrowed, inputs are owned, and [`Graph::backward`] returns the gradient of
//! a scalar output with respect to every bound parameter, keyed by name.

#![allow(clippy::needless_range_loop)]

use std::borrow::Cow;
use std::collections::BTreeMap;

use super::tensor::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Mask(Var, Vec<f64>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        key_valid: Vec<bool>,
        probs: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    L2NormRows(Var, Vec<f64>),
    InfoNce(Var, Matrix),
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    params: Vec<(String, Var)>,
}

pub type Gradients = BTreeMap<String, Matrix>;

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Cow<'a, Matrix>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// A constant: gradients never flow into it.
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(Cow::Owned(m), Op::Leaf, false)
    }

    pub fn param(&mut self, name: &str, m: &'a Matrix) -> Var {
        let v = self.push(Cow::Borrowed(m), Op::Leaf, true);
        self.params.push((name.to_string(), v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let needs = self.needs(&[a, b]);
        self.push(Cow::Owned(value), Op::MatMul(a, b), needs)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        let needs = self.needs(&[a, b]);
        self.push(Cow::Owned(value), Op::MatMulT(a, b), needs)
    }

    /// Adds a 1×n row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(bias));
        assert_eq!((1, am.cols()), bm.shape(), "bias shape");
        let mut value = am.clone();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(bm.data()) {
                *x += b;
            }
        }
        let needs = self.needs(&[a, bias]);
        self.push(Cow::Owned(value), Op::AddBias(a, bias), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let needs = self.needs(&[a, b]);
        self.push(Cow::Owned(value), Op::Add(a, b), needs)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let needs = self.needs(&[a]);
        self.push(Cow::Owned(value), Op::Scale(a, s), needs)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()));
        let needs = self.needs(&[a]);
        self.push(Cow::Owned(value), Op::Gelu(a), needs)
    }

    /// Elementwise product with a constant mask (inverted dropout).
    pub fn mask(&mut self, a: Var, mask: Vec<f64>) -> Var {
        let am = self.value(a);
        assert_eq!(mask.len(), am.data().len());
        let data = am.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Matrix::from_vec(am.rows(), am.cols(), data);
        let needs = self.needs(&[a]);
        self.push(Cow::Owned(value), Op::Mask(a, mask), needs)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xm = self.value(x);
        let (rows, cols) = xm.shape();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xm.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat.set(r, c, h);
                out.set(r, c, g[c] * h + b[c]);
            }
        }
        let needs = self.needs(&[x, gamma, beta]);
        self.push(
            Cow::Owned(out),
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

    /// Multi-head scaled dot-product attention over consecutive blocks of
    /// `seq_len` rows. Keys whose row is not valid receive zero weight.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        key_valid: Vec<bool>,
    ) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let (rows, width) = qm.shape();
        assert_eq!(rows % seq_len, 0, "rows must be whole sequences");
        assert_eq!(width % heads, 0, "width must split into heads");
        assert_eq!(key_valid.len(), rows);
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n_seq = rows / seq_len;
        let mut probs = vec![0.0; n_seq * heads * seq_len * seq_len];
        let mut out = Matrix::zeros(rows, width);
        for s in 0..n_seq {
            let base = s * seq_len;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..seq_len {
                    let p = &mut probs[((s * heads + h) * seq_len + i) * seq_len..][..seq_len];
                    let qi = &qm.row(base + i)[cols.clone()];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..seq_len {
                        if key_valid[base + j] {
                            p[j] = dot(qi, &km.row(base + j)[cols.clone()]) * scale;
                            max = max.max(p[j]);
                        }
                    }
                    let mut sum = 0.0;
                    for j in 0..seq_len {
                        p[j] = if key_valid[base + j] {
                            (p[j] - max).exp()
                        } else {
                            0.0
                        };
                        sum += p[j];
                    }
                    let out_row = &mut out.row_mut(base + i)[cols.clone()];
                    for j in 0..seq_len {
                        p[j] /= sum;
                        if p[j] != 0.0 {
                            for (o, x) in out_row.iter_mut().zip(&vm.row(base + j)[cols.clone()]) {
                                *o += p[j] * x;
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs(&[q, k, v]);
        self.push(
            Cow::Owned(out),
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                key_valid,
                probs,
            },
            needs,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for p in parts {
                let pm = self.value(*p);
                assert_eq!(pm.rows(), rows, "concat row mismatch");
                out.row_mut(r)[offset..offset + pm.cols()].copy_from_slice(pm.row(r));
                offset += pm.cols();
            }
        }
        let needs = self.needs(parts);
        self.push(Cow::Owned(out), Op::ConcatCols(parts.to_vec()), needs)
    }

    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Var {
        let am = self.value(a);
        let mut out = Matrix::zeros(index.len(), am.cols());
        for (r, &src) in index.iter().enumerate() {
            out.row_mut(r).copy_from_slice(am.row(src));
        }
        let needs = self.needs(&[a]);
        self.push(Cow::Owned(out), Op::GatherRows(a, index), needs)
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let mut out = am.clone();
        let mut norms = Vec::with_capacity(am.rows());
        for r in 0..am.rows() {
            let n = super::tensor::norm(am.row(r)).max(NORM_FLOOR);
            norms.push(n);
            out.row_mut(r).iter_mut().for_each(|x| *x /= n);
        }
        let needs = self.needs(&[a]);
        self.push(Cow::Owned(out), Op::L2NormRows(a, norms), needs)
    }

    /// Mean over rows of `-log softmax(row)[i]`, the positive of row `i`
    /// being column `i`.
    pub fn info_nce(&mut self, logits: Var) -> Var {
        let lm = self.value(logits);
        let b = lm.rows();
        assert_eq!(b, lm.cols(), "logits must be square");
        let mut softmax = Matrix::zeros(b, b);
        let mut loss = 0.0;
        for i in 0..b {
            let row = lm.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[i];
            for j in 0..b {
                softmax.set(i, j, (row[j] - lse).exp());
            }
        }
        let value = Matrix::from_vec(1, 1, vec![loss / b as f64]);
        let needs = self.needs(&[logits]);
        self.push(Cow::Owned(value), Op::InfoNce(logits, softmax), needs)
    }

    /// Gradients of the scalar `out` with respect to every bound parameter.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(
            self.value(out).shape(),
            (1, 1),
            "backward needs a scalar output"
        );
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let send = |grads: &mut Vec<Option<Matrix>>, v: Var, m: Matrix| {
                if self.nodes[v.0].needs_grad {
                    match &mut grads[v.0] {
                        Some(acc) => acc.add_assign(&m),
                        slot => *slot = Some(m),
                    }
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        send(&mut grads, *a, g.matmul_t(self.value(*b)));
                    }
                    if self.nodes[b.0].needs_grad {
                        send(&mut grads, *b, self.value(*a).t_matmul(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        send(&mut grads, *a, g.matmul(self.value(*b)));
                    }
                    if self.nodes[b.0].needs_grad {
                        send(&mut grads, *b, g.t_matmul(self.value(*a)));
                    }
                }
                Op::AddBias(a, bias) => {
                    send(&mut grads, *bias, g.column_sums());
                    send(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    send(&mut grads, *b, g.clone());
                    send(&mut grads, *a, g);
                }
                Op::Scale(a, s) => send(&mut grads, *a, g.map(|x| x * s)),
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let data = x
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gy)| {
                            let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                            let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                            gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                        })
                        .collect();
                    send(&mut grads, *a, Matrix::from_vec(x.rows(), x.cols(), data));
                }
                Op::Mask(a, mask) => {
                    let data = g.data().iter().zip(mask).map(|(x, m)| x * m).collect();
                    send(&mut grads, *a, Matrix::from_vec(g.rows(), g.cols(), data));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (rows, cols) = g.shape();
                    let gam = self.value(*gamma).data();
                    let mut dgamma = Matrix::zeros(1, cols);
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let hr = xhat.row(r);
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for c in 0..cols {
                            dgamma.data_mut()[c] += gr[c] * hr[c];
                            let d = gr[c] * gam[c];
                            sum_d += d;
                            sum_dh += d * hr[c];
                        }
                        let n = cols as f64;
                        for c in 0..cols {
                            let d = gr[c] * gam[c];
                            dx.set(r, c, inv_std[r] / n * (n * d - sum_d - hr[c] * sum_dh));
                        }
                    }
                    send(&mut grads, *beta, g.column_sums());
                    send(&mut grads, *gamma, dgamma);
                    send(&mut grads, *x, dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    seq_len,
                    heads,
                    key_valid,
                    probs,
                } => {
                    let (dq, dk, dv) =
                        self.attention_backward(&g, *q, *k, *v, *seq_len, *heads, key_valid, probs);
                    send(&mut grads, *q, dq);
                    send(&mut grads, *k, dk);
                    send(&mut grads, *v, dv);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let cols = self.value(*p).cols();
                        if self.nodes[p.0].needs_grad {
                            let mut part = Matrix::zeros(g.rows(), cols);
                            for r in 0..g.rows() {
                                part.row_mut(r)
                                    .copy_from_slice(&g.row(r)[offset..offset + cols]);
                            }
                            send(&mut grads, *p, part);
                        }
                        offset += cols;
                    }
                }
                Op::GatherRows(a, index) => {
                    let am = self.value(*a);
                    let mut da = Matrix::zeros(am.rows(), am.cols());
                    for (r, &src) in index.iter().enumerate() {
                        for (d, x) in da.row_mut(src).iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    send(&mut grads, *a, da);
                }
                Op::L2NormRows(a, norms) => {
                    let y = &node.value;
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let proj = dot(yr, gr);
                        for (c, d) in da.row_mut(r).iter_mut().enumerate() {
                            *d = (gr[c] - yr[c] * proj) / norms[r];
                        }
                    }
                    send(&mut grads, *a, da);
                }
                Op::InfoNce(logits, softmax) => {
                    let b = softmax.rows();
                    let upstream = g.get(0, 0) / b as f64;
                    let mut d = softmax.map(|p| p * upstream);
                    for j in 0..b {
                        d.set(j, j, d.get(j, j) - upstream);
                    }
                    send(&mut grads, *logits, d);
                }
            }
        }

        let mut out = Gradients::new();
        for (name, var) in &self.params {
            let shape = self.value(*var).shape();
            let g = grads[var.0]
                .take()
                .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1));
            match out.get_mut(name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Matrix,
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        key_valid: &[bool],
        probs: &[f64],
    ) -> (Matrix, Matrix, Matrix) {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let (rows, width) = qm.shape();
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Matrix::zeros(rows, width);
        let mut dk = Matrix::zeros(rows, width);
        let mut dv = Matrix::zeros(rows, width);
        let mut dp = vec![0.0; seq_len];
        for s in 0..rows / seq_len {
            let base = s * seq_len;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..seq_len {
                    let p = &probs[((s * heads + h) * seq_len + i) * seq_len..][..seq_len];
                    let gi = &g.row(base + i)[cols.clone()];
                    let mut weighted = 0.0;
                    for j in 0..seq_len {
                        if !key_valid[base + j] {
                            dp[j] = 0.0;
                            continue;
                        }
                        dp[j] = dot(gi, &vm.row(base + j)[cols.clone()]);
                        weighted += p[j] * dp[j];
                        for (d, x) in dv.row_mut(base + j)[cols.clone()].iter_mut().zip(gi) {
                            *d += p[j] * x;
                        }
                    }
                    for j in 0..seq_len {
                        if !key_valid[base + j] {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj: Vec<f64> = km.row(base + j)[cols.clone()].to_vec();
                        for (d, x) in dq.row_mut(base + i)[cols.clone()].iter_mut().zip(&kj) {
                            *d += ds * x;
                        }
                        let qi: Vec<f64> = qm.row(base + i)[cols.clone()].to_vec();
                        for (d, x) in dk.row_mut(base + j)[cols.clone()].iter_mut().zip(&qi) {
                            *d += ds * x;
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
    }

    /// Central-difference check of every parameter entry of a small graph.
    fn check(build: impl Fn(&mut Graph<'_>, &[Matrix]) -> Var, params: Vec<Matrix>) {
        let mut g = Graph::new();
        for (i, p) in params.iter().enumerate() {
            g.param(&format!("p{i}"), p);
        }
        let out = build(&mut g, &params);
        let grads = g.backward(out);
        let eval = |ps: &[Matrix]| {
            let mut g = Graph::new();
            for (i, p) in ps.iter().enumerate() {
                g.param(&format!("p{i}"), p);
            }
            let o = build(&mut g, ps);
            g.value(o).get(0, 0)
        };
        let h = 1e-5;
        for (pi, p) in params.iter().enumerate() {
            for e in 0..p.data().len() {
                let mut plus = params.clone();
                plus[pi].data_mut()[e] += h;
                let mut minus = params.clone();
                minus[pi].data_mut()[e] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let analytic = grads[&format!("p{pi}")].data()[e];
                assert!(
                    (numeric - analytic).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "param {pi} entry {e}: numeric {numeric} analytic {analytic}"
                );
            }
        }
    }

    // The closures below re-bind parameters by position: node i is parameter i.
    fn p(i: usize) -> Var {
        Var(i)
    }

    #[test]
    fn linear_gelu_layernorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = vec![
            random(3, 4, &mut rng),
            random(4, 5, &mut rng),
            random(1, 5, &mut rng),
            random(1, 5, &mut rng),
            random(1, 5, &mut rng),
        ];
        check(
            |g, _| {
                let h = g.matmul(p(0), p(1));
                let h = g.add_bias(h, p(2));
                let h = g.gelu(h);
                let h = g.layer_norm(h, p(3), p(4));
                let n = g.l2_normalize_rows(h);
                let s = g.matmul_t(n, n);
                let s = g.scale(s, 3.0);
                g.info_nce(s)
            },
            params,
        );
    }

    #[test]
    fn attention_gradients_with_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = vec![
            random(6, 4, &mut rng),
            random(6, 4, &mut rng),
            random(6, 4, &mut rng),
            random(2, 8, &mut rng),
        ];
        check(
            |g, _| {
                let valid = vec![true, true, false, true, false, false];
                let a = g.attention(p(0), p(1), p(2), 3, 2, valid);
                let pooled = g.gather_rows(a, vec![0, 3]);
                let x = g.concat_cols(&[pooled, pooled]);
                let x = g.mask(
                    x,
                    vec![
                        1.0, 0.0, 2.0, 1.0, 1.0, 1.0, 0.5, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0,
                        1.0,
                    ],
                );
                let y = g.add(x, p(3));
                let s = g.matmul_t(y, y);
                g.info_nce(s)
            },
            params,
        );
    }

    #[test]
    fn inputs_receive_no_gradient() {
        let w = Matrix::filled(2, 2, 0.5);
        let mut g = Graph::new();
        let x = g.input(Matrix::filled(2, 2, 1.0));
        let wv = g.param("w", &w);
        let y = g.matmul(x, wv);
        let loss = g.info_nce(y);
        let grads = g.backward(loss);
        assert_eq!(grads.len(), 1);
        assert_eq!(grads["w"].shape(), (2, 2));
    }
}
