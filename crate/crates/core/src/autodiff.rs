//! Reverse-mode automatic differentiation over `ndarray` matrices.
//!
//! A [`Tape`] records a compute graph of 2-D f64 arrays (scalars are 1×1)
//! and plays it backward to produce exact gradients for every named leaf.
//! The op set is exactly what the transformer, the velocity-matching loss,
//! and the policy surrogate need; each backward rule is checked against
//! central finite differences in the tests below.

use ndarray::{Array2, Axis};
use std::collections::BTreeMap;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Gradients keyed by leaf name.
pub type GradMap = BTreeMap<String, Array2<f64>>;

enum Op {
    Leaf { name: Option<String> },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    AddRow(usize, usize),
    Gelu(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    SoftmaxRows(usize),
    Rotate { x: usize, cos: Array2<f64>, sin: Array2<f64> },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows { x: usize, start: usize, len: usize },
    SliceCols { x: usize, start: usize, len: usize },
    GatherRows { table: usize, indices: Vec<usize> },
    SumAll(usize),
    MeanAll(usize),
    Exp(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    MinElem(usize, usize),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Compute-graph recorder. Build values through the op methods, then call
/// [`Tape::backward`] on a 1×1 loss node.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Array2<f64> {
        &self.nodes[var.0].value
    }

    pub fn scalar_value(&self, var: Var) -> f64 {
        let v = self.value(var);
        assert_eq!(v.dim(), (1, 1), "expected a scalar node");
        v[(0, 0)]
    }

    /// Tracked parameter leaf; gradients are reported under `name`.
    pub fn leaf(&mut self, name: &str, value: Array2<f64>) -> Var {
        self.push(
            value,
            Op::Leaf {
                name: Some(name.to_string()),
            },
        )
    }

    /// Untracked constant.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf { name: None })
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(value, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(value, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = &self.nodes[a.0].value * c;
        self.push(value, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = &self.nodes[a.0].value + c;
        self.push(value, Op::AddScalar(a.0))
    }

    /// `(m,k) · (k,n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(value, Op::MatMul(a.0, b.0))
    }

    /// `(m,k) · (n,k)ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        self.push(value, Op::MatMulNT(a.0, b.0))
    }

    /// `(m,n) + (1,n)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.nodes[row.0].value.nrows(), 1);
        let value = &self.nodes[a.0].value + &self.nodes[row.0].value;
        self.push(value, Op::AddRow(a.0, row.0))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(gelu);
        self.push(value, Op::Gelu(a.0))
    }

    /// Row-wise layer norm with learned scale (1,n) and shift (1,n).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let n = xv.ncols() as f64;
        let mut out = xv.clone();
        for mut row in out.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let rstd = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * g[(0, j)] + b[(0, j)];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.nodes[x.0].value.clone();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(out, Op::SoftmaxRows(x.0))
    }

    /// Rotate column pairs `(2j, 2j+1)` of each row by precomputed angles;
    /// `cos`/`sin` have shape `(rows, cols/2)`.
    pub fn rotate_pairs(&mut self, x: Var, cos: Array2<f64>, sin: Array2<f64>) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(cos.dim(), (xv.nrows(), xv.ncols() / 2));
        assert_eq!(sin.dim(), cos.dim());
        let value = rotate_forward(xv, &cos, &sin);
        self.push(value, Op::Rotate { x: x.0, cos, sin })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.nodes[parts[0].0].value.ncols();
        let total: usize = parts.iter().map(|v| self.nodes[v.0].value.nrows()).sum();
        let mut out = Array2::zeros((total, cols));
        let mut row = 0;
        for part in parts {
            let pv = &self.nodes[part.0].value;
            out.slice_mut(ndarray::s![row..row + pv.nrows(), ..])
                .assign(pv);
            row += pv.nrows();
        }
        self.push(out, Op::ConcatRows(parts.iter().map(|v| v.0).collect()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0].0].value.nrows();
        let total: usize = parts.iter().map(|v| self.nodes[v.0].value.ncols()).sum();
        let mut out = Array2::zeros((rows, total));
        let mut col = 0;
        for part in parts {
            let pv = &self.nodes[part.0].value;
            out.slice_mut(ndarray::s![.., col..col + pv.ncols()])
                .assign(pv);
            col += pv.ncols();
        }
        self.push(out, Op::ConcatCols(parts.iter().map(|v| v.0).collect()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.nodes[x.0]
            .value
            .slice(ndarray::s![start..start + len, ..])
            .to_owned();
        self.push(
            value,
            Op::SliceRows {
                x: x.0,
                start,
                len,
            },
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.nodes[x.0]
            .value
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.push(
            value,
            Op::SliceCols {
                x: x.0,
                start,
                len,
            },
        )
    }

    /// Row gather (embedding lookup); backward scatter-adds into the table.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let tv = &self.nodes[table.0].value;
        let mut out = Array2::zeros((indices.len(), tv.ncols()));
        for (i, &idx) in indices.iter().enumerate() {
            out.row_mut(i).assign(&tv.row(idx));
        }
        self.push(
            out,
            Op::GatherRows {
                table: table.0,
                indices: indices.to_vec(),
            },
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(x.0))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let m = v.sum() / v.len() as f64;
        self.push(Array2::from_elem((1, 1), m), Op::MeanAll(x.0))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(f64::exp);
        self.push(value, Op::Exp(x.0))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| v.clamp(lo, hi));
        self.push(value, Op::Clamp { x: x.0, lo, hi })
    }

    pub fn min_elem(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.dim(), bv.dim());
        let mut value = av.clone();
        value.zip_mut_with(bv, |x, &y| *x = x.min(y));
        self.push(value, Op::MinElem(a.0, b.0))
    }

    /// Mean squared difference of two same-shape nodes, as a 1×1 node.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// Backpropagate from a 1×1 loss node; returns gradients for every
    /// named leaf, keyed by name.
    pub fn backward(&self, loss: Var) -> GradMap {
        assert_eq!(
            self.nodes[loss.0].value.dim(),
            (1, 1),
            "backward requires a scalar loss"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf { .. } => {
                    grads[i] = Some(g); // keep for collection below
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads, *a, &g * &self.nodes[*b].value);
                    accumulate(&mut grads, *b, &g * &self.nodes[*a].value);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, &g * *c),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::MatMul(a, b) => {
                    accumulate(&mut grads, *a, g.dot(&self.nodes[*b].value.t()));
                    accumulate(&mut grads, *b, self.nodes[*a].value.t().dot(&g));
                }
                Op::MatMulNT(a, b) => {
                    accumulate(&mut grads, *a, g.dot(&self.nodes[*b].value));
                    accumulate(&mut grads, *b, g.t().dot(&self.nodes[*a].value));
                }
                Op::AddRow(a, row) => {
                    let row_grad = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *row, row_grad);
                }
                Op::Gelu(a) => {
                    let mut dx = g;
                    dx.zip_mut_with(&self.nodes[*a].value, |gv, &xv| *gv *= gelu_derivative(xv));
                    accumulate(&mut grads, *a, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    eps,
                } => {
                    let (dx, dgamma, dbeta) =
                        layer_norm_backward(&self.nodes[*x].value, &self.nodes[*gamma].value, &g, *eps);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::SoftmaxRows(x) => {
                    let s = &self.nodes[i].value;
                    let mut dx = g;
                    for (mut grow, srow) in dx.rows_mut().into_iter().zip(s.rows()) {
                        let dot: f64 = grow.iter().zip(srow.iter()).map(|(a, b)| a * b).sum();
                        for (gv, &sv) in grow.iter_mut().zip(srow.iter()) {
                            *gv = sv * (*gv - dot);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Rotate { x, cos, sin } => {
                    // Inverse rotation: transpose of an orthonormal map.
                    let neg_sin = sin.mapv(|v| -v);
                    let dx = rotate_forward(&g, cos, &neg_sin);
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut row = 0;
                    for &p in parts {
                        let n = self.nodes[p].value.nrows();
                        let part_grad = g.slice(ndarray::s![row..row + n, ..]).to_owned();
                        accumulate(&mut grads, p, part_grad);
                        row += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for &p in parts {
                        let n = self.nodes[p].value.ncols();
                        let part_grad = g.slice(ndarray::s![.., col..col + n]).to_owned();
                        accumulate(&mut grads, p, part_grad);
                        col += n;
                    }
                }
                Op::SliceRows { x, start, len } => {
                    let src = &self.nodes[*x].value;
                    let mut dx = Array2::zeros(src.raw_dim());
                    dx.slice_mut(ndarray::s![*start..*start + *len, ..]).assign(&g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::SliceCols { x, start, len } => {
                    let src = &self.nodes[*x].value;
                    let mut dx = Array2::zeros(src.raw_dim());
                    dx.slice_mut(ndarray::s![.., *start..*start + *len]).assign(&g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::GatherRows { table, indices } => {
                    let tv = &self.nodes[*table].value;
                    let mut dt = Array2::zeros(tv.raw_dim());
                    for (i, &idx) in indices.iter().enumerate() {
                        let mut target = dt.row_mut(idx);
                        target += &g.row(i);
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::SumAll(x) => {
                    let gv = g[(0, 0)];
                    let dx = Array2::from_elem(self.nodes[*x].value.raw_dim(), gv);
                    accumulate(&mut grads, *x, dx);
                }
                Op::MeanAll(x) => {
                    let n = self.nodes[*x].value.len() as f64;
                    let gv = g[(0, 0)] / n;
                    let dx = Array2::from_elem(self.nodes[*x].value.raw_dim(), gv);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Exp(x) => {
                    let dx = &g * &self.nodes[i].value;
                    accumulate(&mut grads, *x, dx);
                }
                Op::Clamp { x, lo, hi } => {
                    let mut dx = g;
                    dx.zip_mut_with(&self.nodes[*x].value, |gv, &xv| {
                        if xv < *lo || xv > *hi {
                            *gv = 0.0;
                        }
                    });
                    accumulate(&mut grads, *x, dx);
                }
                Op::MinElem(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let mut da = g.clone();
                    let mut db = g;
                    for ((ga, gb), (&x, &y)) in da
                        .iter_mut()
                        .zip(db.iter_mut())
                        .zip(av.iter().zip(bv.iter()))
                    {
                        if x <= y {
                            *gb = 0.0;
                        } else {
                            *ga = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
            }
        }

        let mut out = GradMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { name: Some(name) } = &node.op {
                let grad = grads[i]
                    .take()
                    .unwrap_or_else(|| Array2::zeros(node.value.raw_dim()));
                out.insert(name.clone(), grad);
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], idx: usize, g: Array2<f64>) {
    match &mut grads[idx] {
        Some(existing) => *existing += &g,
        slot => *slot = Some(g),
    }
}

fn rotate_forward(x: &Array2<f64>, cos: &Array2<f64>, sin: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for (mut row, (crow, srow)) in out
        .rows_mut()
        .into_iter()
        .zip(cos.rows().into_iter().zip(sin.rows()))
    {
        for j in 0..crow.len() {
            let (c, s) = (crow[j], srow[j]);
            let x1 = row[2 * j];
            let x2 = row[2 * j + 1];
            row[2 * j] = c * x1 - s * x2;
            row[2 * j + 1] = s * x1 + c * x2;
        }
    }
    out
}

const GELU_COEF: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    let u = (2.0 / std::f64::consts::PI).sqrt() * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let u = k * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * k * (1.0 + 3.0 * GELU_COEF * x * x)
}

fn layer_norm_backward(
    x: &Array2<f64>,
    gamma: &Array2<f64>,
    g: &Array2<f64>,
    eps: f64,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let n = x.ncols() as f64;
    let mut dx = Array2::zeros(x.raw_dim());
    let mut dgamma = Array2::zeros((1, x.ncols()));
    let mut dbeta = Array2::zeros((1, x.ncols()));
    for r in 0..x.nrows() {
        let row = x.row(r);
        let grow = g.row(r);
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rstd = 1.0 / (var + eps).sqrt();
        // dxhat = g * gamma; dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
        let mut dxhat = vec![0.0; x.ncols()];
        let mut xhat = vec![0.0; x.ncols()];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..x.ncols() {
            xhat[j] = (row[j] - mean) * rstd;
            dxhat[j] = grow[j] * gamma[(0, j)];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xhat[j];
            dgamma[(0, j)] += grow[j] * xhat[j];
            dbeta[(0, j)] += grow[j];
        }
        mean_dxhat /= n;
        mean_dxhat_xhat /= n;
        for j in 0..x.ncols() {
            dx[(r, j)] = rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
        }
    }
    (dx, dgamma, dbeta)
}
