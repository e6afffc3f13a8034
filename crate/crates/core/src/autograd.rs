//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is built per example: parameters are borrowed (never copied),
//! intermediate values are recorded on a tape, and [`Graph::backward`] walks
//! the tape in reverse accumulating gradients into a dense per-parameter
//! buffer.

use std::rc::Rc;

use crate::tensor::{log_sum_exp, softmax, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-5;

enum Op {
    Constant,
    Param(usize),
    Add(Var, Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Scale(Var, f64),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    SoftmaxRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    MulConst(Var, Rc<Matrix>),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var, Vec<usize>),
    SelectCols(Var, Vec<usize>),
    CrossEntropy(Var, usize, Vec<f64>),
    Sum(Vec<Var>),
}

struct Node {
    value: Option<Matrix>,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p [Matrix],
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p [Matrix]) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(i)) => &self.params[*i],
            _ => unreachable!("node without value"),
        }
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Constant)
    }

    pub fn param(&mut self, index: usize) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(index),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let mut out = self.value(a).clone();
        let r = self.value(row);
        assert_eq!(r.rows, 1);
        assert_eq!(r.cols, out.cols);
        for i in 0..out.rows {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    /// Row-wise layer normalization with learned gain and bias (`1×c` each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows, xv.cols);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(s);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
        }
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut out = xhat.clone();
        for r in 0..rows {
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = *o * g.data[c] + b.data[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv
            .data
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let out = Matrix::from_vec(xv.rows, xv.cols, data);
        self.push(out, Op::Gelu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(xv.rows, xv.cols);
        for r in 0..xv.rows {
            out.row_mut(r).copy_from_slice(&softmax(xv.row(r)));
        }
        self.push(out, Op::SoftmaxRows(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(xv.rows, len);
        for r in 0..xv.rows {
            out.row_mut(r)
                .copy_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(x, start))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for p in &parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows, rows);
            for r in 0..rows {
                out.row_mut(r)[offset..offset + pv.cols].copy_from_slice(pv.row(r));
            }
            offset += pv.cols;
        }
        self.push(out, Op::ConcatCols(parts))
    }

    /// Element-wise product with a constant (dropout masks).
    pub fn mul_const(&mut self, x: Var, mask: Rc<Matrix>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.data.len(), mask.data.len());
        let data = xv.data.iter().zip(&mask.data).map(|(a, b)| a * b).collect();
        let out = Matrix::from_vec(xv.rows, xv.cols, data);
        self.push(out, Op::MulConst(x, mask))
    }

    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(rows.len(), xv.cols);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(xv.row(r));
        }
        self.push(out, Op::GatherRows(x, rows))
    }

    /// Mean of the selected rows, as a `1×c` row.
    pub fn mean_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        assert!(!rows.is_empty(), "mean over empty row set");
        let xv = self.value(x);
        let mut out = Matrix::zeros(1, xv.cols);
        for &r in &rows {
            for (o, v) in out.data.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        let n = rows.len() as f64;
        out.data.iter_mut().for_each(|v| *v /= n);
        self.push(out, Op::MeanRows(x, rows))
    }

    pub fn select_cols(&mut self, x: Var, cols: Vec<usize>) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(xv.rows, cols.len());
        for r in 0..xv.rows {
            for (j, &c) in cols.iter().enumerate() {
                out.set(r, j, xv.get(r, c));
            }
        }
        self.push(out, Op::SelectCols(x, cols))
    }

    /// `-log softmax(x)[target]` for a `1×n` row of scores.
    pub fn cross_entropy(&mut self, x: Var, target: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows, 1);
        let lse = log_sum_exp(&xv.data);
        let loss = lse - xv.data[target];
        let probs = softmax(&xv.data);
        self.push(Matrix::scalar(loss), Op::CrossEntropy(x, target, probs))
    }

    pub fn sum(&mut self, parts: Vec<Var>) -> Var {
        let mut out = self.value(parts[0]).clone();
        for p in &parts[1..] {
            out.add_assign(self.value(*p));
        }
        self.push(out, Op::Sum(parts))
    }

    /// Backpropagates from a scalar `root`, returning one gradient buffer
    /// per parameter (zeros where the parameter was unused).
    pub fn backward(&self, root: Var) -> Vec<Matrix> {
        assert_eq!(self.value(root).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Matrix> = self
            .params
            .iter()
            .map(|p| Matrix::zeros(p.rows, p.cols))
            .collect();
        grads[root.0] = Some(Matrix::scalar(1.0));

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Constant => {}
                Op::Param(i) => param_grads[*i].add_assign(&g),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Matrix::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, v) in gr.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.matmul(self.value(*b));
                    let gb = g.t_matmul(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.scale(*s)),
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gamma);
                    let cols = g.cols;
                    let mut gx = Matrix::zeros(g.rows, cols);
                    let mut ggamma = Matrix::zeros(1, cols);
                    let mut gbeta = Matrix::zeros(1, cols);
                    for r in 0..g.rows {
                        let dy = g.row(r);
                        let xh = xhat.row(r);
                        let dxhat: Vec<f64> = dy.iter().zip(&gv.data).map(|(d, w)| d * w).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dx =
                            dxhat.iter().zip(xh).map(|(d, h)| d * h).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            gx.data[r * cols + c] = rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                            ggamma.data[c] += dy[c] * xh[c];
                            gbeta.data[c] += dy[c];
                        }
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *gamma, ggamma);
                    acc(&mut grads, *beta, gbeta);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let data = xv
                        .data
                        .iter()
                        .zip(&g.data)
                        .map(|(&v, &d)| {
                            let u = GELU_C * (v + GELU_A * v * v * v);
                            let t = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                            d * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                        })
                        .collect();
                    acc(&mut grads, *x, Matrix::from_vec(xv.rows, xv.cols, data));
                }
                Op::SoftmaxRows(x) => {
                    let y = self.nodes[idx].value.as_ref().expect("softmax value");
                    let mut gx = Matrix::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let dr = g.row(r);
                        let inner: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for (o, (yy, dd)) in gx.row_mut(r).iter_mut().zip(yr.iter().zip(dr)) {
                            *o = yy * (dd - inner);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::SliceCols(x, start) => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows, xv.cols);
                    for r in 0..g.rows {
                        gx.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let cols = self.value(*p).cols;
                        let mut gp = Matrix::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            gp.row_mut(r)
                                .copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        offset += cols;
                        acc(&mut grads, *p, gp);
                    }
                }
                Op::MulConst(x, mask) => {
                    let data = g.data.iter().zip(&mask.data).map(|(a, b)| a * b).collect();
                    acc(&mut grads, *x, Matrix::from_vec(g.rows, g.cols, data));
                }
                Op::GatherRows(x, rows) => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows, xv.cols);
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, v) in gx.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::MeanRows(x, rows) => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows, xv.cols);
                    let n = rows.len() as f64;
                    for &r in rows {
                        for (o, v) in gx.row_mut(r).iter_mut().zip(&g.data) {
                            *o += v / n;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::SelectCols(x, cols) => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows, xv.cols);
                    for r in 0..g.rows {
                        for (j, &c) in cols.iter().enumerate() {
                            gx.data[r * xv.cols + c] += g.get(r, j);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::CrossEntropy(x, target, probs) => {
                    let up = g.item();
                    let mut data: Vec<f64> = probs.iter().map(|p| p * up).collect();
                    data[*target] -= up;
                    acc(&mut grads, *x, Matrix::row_vector(data));
                }
                Op::Sum(parts) => {
                    for p in parts {
                        acc(&mut grads, *p, g.clone());
                    }
                }
            }
        }
        param_grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of a scalar function of the parameters.
    fn check<F>(params: Vec<Matrix>, f: F)
    where
        F: Fn(&mut Graph) -> Var,
    {
        let analytic = {
            let mut g = Graph::new(&params);
            let root = f(&mut g);
            g.backward(root)
        };
        let eval = |ps: &[Matrix]| {
            let mut g = Graph::new(ps);
            let root = f(&mut g);
            g.value(root).item()
        };
        let h = 1e-5;
        for (pi, p) in params.iter().enumerate() {
            for k in 0..p.len() {
                let mut plus = params.clone();
                plus[pi].data[k] += h;
                let mut minus = params.clone();
                minus[pi].data[k] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[pi].data[k];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (a - numeric).abs() / denom < 1e-5,
                    "param {pi}[{k}]: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn gradients_of_attention_block_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = vec![
            Matrix::randn(4, 6, 1.0, &mut rng),
            Matrix::randn(6, 6, 0.5, &mut rng),
            Matrix::randn(1, 6, 1.0, &mut rng),
            Matrix::randn(1, 6, 1.0, &mut rng),
        ];
        check(params, |g| {
            let x = g.param(0);
            let w = g.param(1);
            let gamma = g.param(2);
            let beta = g.param(3);
            let h = g.layer_norm(x, gamma, beta);
            let q = g.matmul(h, w);
            let q1 = g.slice_cols(q, 0, 3);
            let q2 = g.slice_cols(q, 3, 3);
            let s = g.matmul_t(q1, q2);
            let s = g.scale(s, 0.7);
            let a = g.softmax_rows(s);
            let o = g.matmul(a, q2);
            let o = g.concat_cols(vec![o, q1]);
            let o = g.gelu(o);
            let o = g.add_row(o, beta);
            let m = g.mean_rows(o, vec![0, 2, 3]);
            let r = g.gather_rows(o, vec![1]);
            let both = g.add(m, r);
            let sel = g.select_cols(both, vec![5, 0, 2]);
            let ce = g.cross_entropy(sel, 1);
            let ce2 = g.scale(ce, 2.0);
            g.sum(vec![ce, ce2])
        });
    }

    #[test]
    fn unused_parameters_get_zero_gradient() {
        let params = vec![Matrix::scalar(2.0), Matrix::scalar(5.0)];
        let mut g = Graph::new(&params);
        let a = g.param(0);
        let sq = g.matmul(a, a);
        let grads = g.backward(sq);
        assert_eq!(grads[0].item(), 4.0);
        assert_eq!(grads[1].item(), 0.0);
    }
}
