//! Minimal tape-based reverse-mode differentiation over dense matrices.
//!
//! A forward pass records every operation on a [`Tape`]; [`Tape::backward`]
//! then propagates a seed gradient from one output node back to every node
//! that requires a gradient. Only the handful of operations the zoo models
//! need are provided.

use crate::linalg::Matrix;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// `a + 1·b` where `b` is a single row.
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Matrix,
        inv_std: Vec<f64>,
    },
    CausalSoftmax(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients(Vec<Option<Matrix>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.0[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.0[v.0].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
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

    /// Differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let g = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), g)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        let g = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMulT(a, b), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        let g = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), g)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        let mut value = self.value(a).clone();
        assert_eq!(value.cols(), r.cols(), "add_row width mismatch");
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(r.data()) {
                *v += b;
            }
        }
        let g = self.needs(a) || self.needs(row);
        self.push(value, Op::AddRow(a, row), g)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        let g = self.needs(a);
        self.push(value, Op::Scale(a, c), g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let g = self.needs(a);
        self.push(value, Op::Tanh(a), g)
    }

    /// Row-wise layer normalisation with learned gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut normed = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in normed.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut value = normed.clone();
        for i in 0..rows {
            for ((o, g), b) in value.row_mut(i).iter_mut().zip(gv).zip(bv) {
                *o = *o * g + b;
            }
        }
        let g = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            g,
        )
    }

    /// Row-wise softmax where row `i` only attends to columns `0..=i`.
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (rows, cols) = av.shape();
        let mut value = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let visible = &av.row(i)[..=i.min(cols - 1)];
            let m = visible.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = value.row_mut(i);
            let mut z = 0.0;
            for (j, v) in visible.iter().enumerate() {
                out[j] = (v - m).exp();
                z += out[j];
            }
            for o in &mut out[..visible.len()] {
                *o /= z;
            }
        }
        let g = self.needs(a);
        self.push(value, Op::CausalSoftmax(a), g)
    }

    /// Row lookup `table[ids[r]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut value = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).copy_from_slice(t.row(id));
        }
        let g = self.needs(table);
        self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            g,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let value = Matrix::from_fn(xv.rows(), len, |i, j| xv[(i, start + j)]);
        let g = self.needs(x);
        self.push(value, Op::SliceCols { x, start }, g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let pv = self.value(*p);
            for i in 0..rows {
                value.row_mut(i)[offset..offset + pv.cols()].copy_from_slice(pv.row(i));
            }
            offset += pv.cols();
        }
        let g = parts.iter().any(|p| self.needs(*p));
        self.push(value, Op::ConcatCols(parts.to_vec()), g)
    }

    /// Propagate `seed` (same shape as `out`) back through the tape.
    pub fn backward(&self, out: Var, seed: Matrix) -> Gradients {
        assert_eq!(seed.shape(), self.value(out).shape(), "seed shape mismatch");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Gradients(grads)
    }

    fn propagate(&self, node: &Node, dy: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, g: Matrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    acc(*a, dy.matmul_t(self.value(*b)));
                }
                if self.needs(*b) {
                    acc(*b, self.value(*a).t_matmul(dy));
                }
            }
            Op::MatMulT(a, b) => {
                if self.needs(*a) {
                    acc(*a, dy.matmul(self.value(*b)));
                }
                if self.needs(*b) {
                    acc(*b, dy.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.clone());
            }
            Op::AddRow(a, row) => {
                acc(*a, dy.clone());
                if self.needs(*row) {
                    acc(*row, column_sums(dy));
                }
            }
            Op::Scale(a, c) => acc(*a, dy.scale(*c)),
            Op::Tanh(a) => {
                let y = &node.value;
                let data = dy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(d, t)| d * (1.0 - t * t))
                    .collect();
                acc(
                    *a,
                    Matrix::from_vec(y.rows(), y.cols(), data).expect("shape"),
                );
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let (rows, cols) = normed.shape();
                if self.needs(*gain) {
                    let mut dg = Matrix::zeros(1, cols);
                    for i in 0..rows {
                        for ((o, d), n) in
                            dg.data_mut().iter_mut().zip(dy.row(i)).zip(normed.row(i))
                        {
                            *o += d * n;
                        }
                    }
                    acc(*gain, dg);
                }
                if self.needs(*bias) {
                    acc(*bias, column_sums(dy));
                }
                if self.needs(*x) {
                    let gv = self.value(*gain).data();
                    let n = cols as f64;
                    let mut dx = Matrix::zeros(rows, cols);
                    for (i, inv) in inv_std.iter().enumerate().take(rows) {
                        let dn: Vec<f64> = dy.row(i).iter().zip(gv).map(|(d, g)| d * g).collect();
                        let sum_dn: f64 = dn.iter().sum();
                        let sum_dn_n: f64 = dn.iter().zip(normed.row(i)).map(|(a, b)| a * b).sum();
                        for ((o, d), nv) in dx.row_mut(i).iter_mut().zip(&dn).zip(normed.row(i)) {
                            *o = inv / n * (n * d - sum_dn - nv * sum_dn_n);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::CausalSoftmax(a) => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let width = (i + 1).min(y.cols());
                    let yr = &y.row(i)[..width];
                    let dr = &dy.row(i)[..width];
                    let inner: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for (j, o) in dx.row_mut(i)[..width].iter_mut().enumerate() {
                        *o = yr[j] * (dr[j] - inner);
                    }
                }
                acc(*a, dx);
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let mut dt = Matrix::zeros(t.rows(), t.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, d) in dt.row_mut(id).iter_mut().zip(dy.row(r)) {
                        *o += d;
                    }
                }
                acc(*table, dt);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for i in 0..dy.rows() {
                    dx.row_mut(i)[*start..*start + dy.cols()].copy_from_slice(dy.row(i));
                }
                acc(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    let part = Matrix::from_fn(dy.rows(), w, |i, j| dy[(i, offset + j)]);
                    acc(*p, part);
                    offset += w;
                }
            }
        }
    }
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for i in 0..m.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(m.row(i)) {
            *o += v;
        }
    }
    out
}
