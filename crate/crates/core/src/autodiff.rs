//! A small reverse-mode tape over [`Matrix`] values.
//!
//! Only the handful of operations the encoder needs are provided, each with a
//! hand-written backward rule. Parameters are referenced by index into a
//! [`ParamSet`] and never copied onto the tape.

use crate::params::{Grads, ParamSet};
use crate::tensor::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Source {
    Param(usize),
    Value(Matrix),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    Cols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Row(Var, usize),
    Gather(Var, Vec<usize>),
    RowRange(Var, usize),
    L2NormalizeRows(Var, Vec<f64>),
}

struct Node {
    src: Source,
    op: Op,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0].src {
            Source::Param(i) => self.params.tensor(*i),
            Source::Value(m) => m,
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node {
            src: Source::Value(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, index: usize) -> Var {
        self.nodes.push(Node {
            src: Source::Param(index),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_nt(self.value(b));
        self.push(out, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let mut out = self.value(a).clone();
        let r = self.value(row).as_slice();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scaled(s);
        self.push(out, Op::Scale(a, s))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = x
            .as_slice()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let out = Matrix::from_vec(x.rows(), x.cols(), data).expect("same shape");
        self.push(out, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma).as_slice();
        let b = self.value(beta).as_slice();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g[c] + b[c]);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Row-wise softmax. Columns flagged `false` in `key_mask` receive exactly
    /// zero probability and do not enter the normaliser.
    pub fn softmax_rows(&mut self, a: Var, key_mask: Option<&[bool]>) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let row = x.row(r);
            let keep = |c: usize| key_mask.map_or(true, |m| m[c]);
            let max = (0..cols)
                .filter(|&c| keep(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in (0..cols).filter(|&c| keep(c)) {
                let e = (row[c] - max).exp();
                out.set(r, c, e);
                sum += e;
            }
            for v in out.row_mut(r) {
                *v /= sum;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Columns `start..start + len`.
    pub fn cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        let out = Matrix::from_fn(x.rows(), len, |r, c| x.get(r, start + c));
        self.push(out, Op::Cols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut off = 0;
        for p in parts {
            let m = self.value(*p);
            for r in 0..rows {
                out.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
            }
            off += m.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(self.value(*p).as_slice());
        }
        let rows = data.len() / cols;
        let out = Matrix::from_vec(rows, cols, data).expect("row concat");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn row(&mut self, a: Var, index: usize) -> Var {
        let out = Matrix::row_vector(self.value(a).row(index).to_vec());
        self.push(out, Op::Row(a, index))
    }

    /// Rows `start..start + len`.
    pub fn row_range(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        let out = Matrix::from_fn(len, x.cols(), |r, c| x.get(start + r, c));
        self.push(out, Op::RowRange(a, start))
    }

    /// Embedding lookup: one row of `table` per id.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let out = Matrix::from_fn(ids.len(), t.cols(), |r, c| t.get(ids[r], c));
        self.push(out, Op::Gather(table, ids.to_vec()))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let n = dot(x.row(r), x.row(r)).sqrt().max(1e-12);
            norms.push(n);
            for v in out.row_mut(r) {
                *v /= n;
            }
        }
        self.push(out, Op::L2NormalizeRows(a, norms))
    }

    /// Propagates the seeded output gradients back to every parameter.
    pub fn backward(&self, seeds: &[(Var, Matrix)]) -> Grads {
        let mut grads = Grads::zeros_like(self.params);
        self.backward_into(seeds, &mut grads);
        grads
    }

    pub fn backward_into(&self, seeds: &[(Var, Matrix)], out: &mut Grads) {
        let mut adj: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            accumulate(&mut adj, *v, g.clone());
            last = last.max(v.0);
        }
        for idx in (0..=last).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    if let Source::Param(p) = node.src {
                        out.get_mut(p).add_assign(&g);
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(self.value(*b));
                    let gb = self.value(*a).matmul_tn(&g);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::MatMulNt(a, b) => {
                    // out = a bᵀ ; da = g b ; db = gᵀ a
                    let ga = g.matmul(self.value(*b));
                    let gb = g.matmul_tn(self.value(*a));
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *b, g.clone());
                    accumulate(&mut adj, *a, g);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gr.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut adj, *row, gr);
                    accumulate(&mut adj, *a, g);
                }
                Op::Scale(a, s) => accumulate(&mut adj, *a, g.scaled(*s)),
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let data = x
                        .as_slice()
                        .iter()
                        .zip(g.as_slice())
                        .map(|(&v, &gv)| {
                            let u = GELU_C * (v + GELU_A * v * v * v);
                            let t = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                            gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                        })
                        .collect();
                    let gx = Matrix::from_vec(x.rows(), x.cols(), data).expect("same shape");
                    accumulate(&mut adj, *a, gx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (rows, cols) = xhat.shape();
                    let gm = self.value(*gamma).as_slice();
                    let mut ggamma = Matrix::zeros(1, cols);
                    let mut gbeta = Matrix::zeros(1, cols);
                    let mut gx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let hr = xhat.row(r);
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for c in 0..cols {
                            let d = gr[c] * gm[c];
                            mean_d += d;
                            mean_dh += d * hr[c];
                            ggamma.row_mut(0)[c] += gr[c] * hr[c];
                            gbeta.row_mut(0)[c] += gr[c];
                        }
                        mean_d /= cols as f64;
                        mean_dh /= cols as f64;
                        for c in 0..cols {
                            let d = gr[c] * gm[c];
                            gx.set(r, c, inv_std[r] * (d - mean_d - hr[c] * mean_dh));
                        }
                    }
                    accumulate(&mut adj, *gamma, ggamma);
                    accumulate(&mut adj, *beta, gbeta);
                    accumulate(&mut adj, *x, gx);
                }
                Op::SoftmaxRows(a) => {
                    let y = self.value(Var(idx));
                    let mut gx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let s = dot(yr, gr);
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = yr[c] * (gr[c] - s);
                        }
                    }
                    accumulate(&mut adj, *a, gx);
                }
                Op::Cols(a, start) => {
                    let x = self.value(*a);
                    let mut gx = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..g.rows() {
                        gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut adj, *a, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let gp = Matrix::from_fn(g.rows(), w, |r, c| g.get(r, off + c));
                        accumulate(&mut adj, *p, gp);
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = self.value(*p).rows();
                        let gp = Matrix::from_fn(h, g.cols(), |r, c| g.get(off + r, c));
                        accumulate(&mut adj, *p, gp);
                        off += h;
                    }
                }
                Op::Row(a, index) => {
                    let x = self.value(*a);
                    let mut gx = Matrix::zeros(x.rows(), x.cols());
                    gx.row_mut(*index).copy_from_slice(g.row(0));
                    accumulate(&mut adj, *a, gx);
                }
                Op::RowRange(a, start) => {
                    let x = self.value(*a);
                    let mut gx = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..g.rows() {
                        gx.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    accumulate(&mut adj, *a, gx);
                }
                Op::Gather(table, ids) => {
                    // Scatter straight into the parameter gradient when the
                    // table is a parameter, to avoid a dense table-sized buffer.
                    if let (Op::Leaf, Source::Param(p)) =
                        (&self.nodes[table.0].op, &self.nodes[table.0].src)
                    {
                        let dst = out.get_mut(*p);
                        for (r, &id) in ids.iter().enumerate() {
                            for (o, v) in dst.row_mut(id).iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                    } else {
                        let t = self.value(*table);
                        let mut gt = Matrix::zeros(t.rows(), t.cols());
                        for (r, &id) in ids.iter().enumerate() {
                            for (o, v) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        accumulate(&mut adj, *table, gt);
                    }
                }
                Op::L2NormalizeRows(a, norms) => {
                    let y = self.value(Var(idx));
                    let mut gx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let s = dot(yr, gr);
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = (gr[c] - yr[c] * s) / norms[r];
                        }
                    }
                    accumulate(&mut adj, *a, gx);
                }
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamSet;

    fn fd_check(params: &ParamSet, f: impl Fn(&ParamSet) -> (f64, Grads)) {
        let (_, grads) = f(params);
        let h = 1e-5;
        for t in 0..params.len() {
            for k in 0..params.tensor(t).len() {
                let mut p = params.clone();
                p.tensor_mut(t).as_mut_slice()[k] += h;
                let up = f(&p).0;
                p.tensor_mut(t).as_mut_slice()[k] -= 2.0 * h;
                let down = f(&p).0;
                let fd = (up - down) / (2.0 * h);
                let an = grads.get(t).as_slice()[k];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "tensor {t} coord {k}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    fn sample_params() -> ParamSet {
        let mut p = ParamSet::default();
        p.push("a", Matrix::from_fn(3, 4, |r, c| ((r * 7 + c * 3) % 5) as f64 * 0.3 - 0.6));
        p.push("b", Matrix::from_fn(4, 4, |r, c| ((r + 2 * c) % 3) as f64 * 0.2 - 0.25));
        p.push("g", Matrix::from_fn(1, 4, |_, c| 1.0 + 0.1 * c as f64));
        p.push("beta", Matrix::from_fn(1, 4, |_, c| 0.05 * c as f64));
        p.push("emb", Matrix::from_fn(5, 4, |r, c| (r as f64 - c as f64) * 0.1));
        p
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let params = sample_params();
        fd_check(&params, |p| {
            let mut tape = Tape::new(p);
            let a = tape.param(0);
            let b = tape.param(1);
            let g = tape.param(2);
            let beta = tape.param(3);
            let emb = tape.param(4);
            let e = tape.gather(emb, &[1, 3, 1]);
            let x = tape.concat_rows(&[a, e]);
            let h = tape.matmul(x, b);
            let h = tape.gelu(h);
            let h = tape.layer_norm(h, g, beta);
            let left = tape.cols(h, 0, 2);
            let right = tape.cols(h, 2, 2);
            let scores = tape.matmul_nt(left, right);
            let scores = tape.scale(scores, 0.7);
            let mask = [true, false, true, true, true, true];
            let attn = tape.softmax_rows(scores, Some(&mask));
            let mixed = tape.matmul(attn, right);
            let both = tape.concat_cols(&[mixed, left]);
            let both = tape.add_row(both, g);
            let both = tape.add(both, h);
            let r = tape.row(both, 2);
            let z = tape.l2_normalize_rows(r);
            let rr = tape.row_range(both, 1, 2);
            // loss = sum(w ⊙ z) + sum(rr²)/2
            let w = Matrix::row_vector(vec![0.3, -1.2, 0.7, 0.5]);
            let loss = dot(tape.value(z).as_slice(), w.as_slice())
                + 0.5 * dot(tape.value(rr).as_slice(), tape.value(rr).as_slice());
            let grads = tape.backward(&[(z, w), (rr, tape.value(rr).clone())]);
            (loss, grads)
        });
    }

    #[test]
    fn masked_columns_get_zero_probability() {
        let params = ParamSet::default();
        let mut tape = Tape::new(&params);
        let x = tape.constant(Matrix::from_fn(2, 3, |r, c| (r + c) as f64));
        let y = tape.softmax_rows(x, Some(&[true, false, true]));
        let y = tape.value(y);
        assert_eq!(y.get(0, 1), 0.0);
        assert!((y.row(1).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
