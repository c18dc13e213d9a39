//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation in evaluation order. [`Tape::backward`]
//! walks the record from the output back to the leaves, applying each
//! operation's adjoint rule exactly once. Nodes created with
//! [`Tape::constant`] (and everything computed only from constants) are
//! skipped during the backward sweep.

use super::matrix::gemm;
use super::Matrix;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation with a hand-written adjoint, recorded via [`Tape::custom`].
pub trait CustomOp {
    /// Returns one gradient per input, shaped like that input.
    fn backward(&self, inputs: &[&Matrix], output: &Matrix, grad: &Matrix) -> Vec<Matrix>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Exp(Var),
    Gelu(Var),
    SoftmaxRows(Var, f64),
    LogSoftmaxRows(Var, f64),
    Transpose(Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    Slice { x: Var, r0: usize, c0: usize },
    Gather { x: Var, index: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    SumSquares(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every recorded node.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `v`. Always present for leaves created with
    /// [`Tape::leaf`]; exactly zero when the leaf does not reach the output.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh form.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Row-wise softmax of `x / temperature`, max-subtracted.
pub fn softmax_rows(x: &Matrix, temperature: f64) -> Result<Matrix> {
    check_temperature(temperature)?;
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / temperature).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Row-wise log-softmax of `x / temperature`.
pub fn log_softmax_rows(x: &Matrix, temperature: f64) -> Result<Matrix> {
    check_temperature(temperature)?;
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row
            .iter()
            .map(|v| ((v - max) / temperature).exp())
            .sum::<f64>()
            .ln();
        for v in row.iter_mut() {
            *v = (*v - max) / temperature - lse;
        }
    }
    Ok(out)
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "softmax temperature must be positive, got {t}"
        )))
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

    /// Trainable input.
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

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.as_slice()[0]
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.value(a).check_same_shape(op, self.value(b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", x.shape(), r.shape()),
            ));
        }
        let mut value = x.clone();
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(r.as_slice()) {
                *v += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    /// Multiplies every row of `a` elementwise by a `1 x cols` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(Error::shape(
                "mul_row",
                format!("{:?} * row {:?}", x.shape(), r.shape()),
            ));
        }
        let mut value = x.clone();
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(r.as_slice()) {
                *v *= b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::MulRow(a, row), rg))
    }

    /// Multiplies row `i` of `a` by `col[i]` (`col` is `rows x 1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (x, c) = (self.value(a), self.value(col));
        if c.cols() != 1 || c.rows() != x.rows() {
            return Err(Error::shape(
                "mul_col",
                format!("{:?} * col {:?}", x.shape(), c.shape()),
            ));
        }
        let mut value = x.clone();
        for i in 0..value.rows() {
            let s = c.as_slice()[i];
            for v in value.row_mut(i) {
                *v *= s;
            }
        }
        let rg = self.rg(a) || self.rg(col);
        Ok(self.push(value, Op::MulCol(a, col), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var> {
        let value = softmax_rows(self.value(a), temperature)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SoftmaxRows(a, temperature), rg))
    }

    pub fn log_softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var> {
        let value = log_softmax_rows(self.value(a), temperature)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::LogSoftmaxRows(a, temperature), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.cols() as f64;
        let mut value = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let rg = self.rg(a);
        self.push(value, Op::LayerNormRows { x: a, inv_std }, rg)
    }

    /// Rectangular block `[r0, r0+rows) x [c0, c0+cols)`.
    pub fn slice(&mut self, a: Var, r0: usize, rows: usize, c0: usize, cols: usize) -> Result<Var> {
        let x = self.value(a);
        if r0 + rows > x.rows() || c0 + cols > x.cols() {
            return Err(Error::shape(
                "slice",
                format!(
                    "block rows {r0}..{} cols {c0}..{} out of {:?}",
                    r0 + rows,
                    c0 + cols,
                    x.shape()
                ),
            ));
        }
        let value = Matrix::from_fn(rows, cols, |r, c| x.get(r0 + r, c0 + c));
        let rg = self.rg(a);
        Ok(self.push(value, Op::Slice { x: a, r0, c0 }, rg))
    }

    /// `out.flat[k] = a.flat[index[k]]`, reshaped to `rows x cols`.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, rows: usize, cols: usize) -> Result<Var> {
        let x = self.value(a);
        if index.len() != rows * cols {
            return Err(Error::shape(
                "gather",
                format!("{} indices for {rows}x{cols}", index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= x.len()) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of {} elements", x.len()),
            ));
        }
        let src = x.as_slice();
        let value = Matrix::from_vec(rows, cols, index.iter().map(|&i| src[i]).collect())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Gather { x: a, index }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            if m.cols() != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column count {} vs {cols}", m.cols()),
                ));
            }
            rows += m.rows();
            data.extend_from_slice(m.as_slice());
        }
        let value = Matrix::from_vec(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let mut cols = 0;
        for &p in parts {
            let m = self.value(p);
            if m.rows() != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row count {} vs {rows}", m.rows()),
                ));
            }
            cols += m.cols();
        }
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            for r in 0..rows {
                value.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Sum of all entries, as a `1 x 1` matrix.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    /// Sum of squared entries, as a `1 x 1` matrix.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).as_slice().iter().map(|v| v * v).sum();
        let rg = self.rg(a);
        self.push(Matrix::filled(1, 1, s), Op::SumSquares(a), rg)
    }

    /// Records a value computed outside the tape together with its adjoint.
    pub fn custom(&mut self, inputs: Vec<Var>, output: Matrix, op: Box<dyn CustomOp>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(output, Op::Custom { inputs, op }, rg)
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.shape() != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("output must be 1x1, got {:?}", out.shape()),
            ));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Matrix::zeros(node.value.rows(), node.value.cols()));
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b);
                    accumulate_with(grads, *a, self.value(*a).shape(), |acc, beta| {
                        gemm(g, false, bv, true, acc, beta)
                    });
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    accumulate_with(grads, *b, self.value(*b).shape(), |acc, beta| {
                        gemm(av, true, g, false, acc, beta)
                    });
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, zip(g, self.value(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, zip(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone());
                if self.rg(*row) {
                    self.acc(grads, *row, Matrix::row_vector(&g.col_sums()));
                }
            }
            Op::MulRow(a, row) => {
                let r = self.value(*row);
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        for (v, s) in ga.row_mut(i).iter_mut().zip(r.as_slice()) {
                            *v *= s;
                        }
                    }
                    self.acc(grads, *a, ga);
                }
                if self.rg(*row) {
                    let x = self.value(*a);
                    let mut gr = vec![0.0; r.cols()];
                    for i in 0..g.rows() {
                        for ((acc, gv), xv) in gr.iter_mut().zip(g.row(i)).zip(x.row(i)) {
                            *acc += gv * xv;
                        }
                    }
                    self.acc(grads, *row, Matrix::row_vector(&gr));
                }
            }
            Op::MulCol(a, col) => {
                let c = self.value(*col);
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        let s = c.as_slice()[i];
                        for v in ga.row_mut(i) {
                            *v *= s;
                        }
                    }
                    self.acc(grads, *a, ga);
                }
                if self.rg(*col) {
                    let x = self.value(*a);
                    let gc: Vec<f64> = (0..g.rows())
                        .map(|i| g.row(i).iter().zip(x.row(i)).map(|(p, q)| p * q).sum())
                        .collect();
                    self.acc(grads, *col, Matrix::from_vec(gc.len(), 1, gc).unwrap());
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.scale(*s)),
            Op::Tanh(a) => self.acc(grads, *a, zip(g, y, |gv, yv| gv * (1.0 - yv * yv))),
            Op::Exp(a) => self.acc(grads, *a, zip(g, y, |gv, yv| gv * yv)),
            Op::Gelu(a) => {
                self.acc(grads, *a, zip(g, self.value(*a), |gv, xv| gv * gelu_grad(xv)))
            }
            Op::SoftmaxRows(a, t) => {
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot) / t;
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::LogSoftmaxRows(a, t) => {
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let gsum: f64 = gr.iter().sum();
                    for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = (gv - yv.exp() * gsum) / t;
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()),
            Op::LayerNormRows { x, inv_std } => {
                let n = y.cols() as f64;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let mg = gr.iter().sum::<f64>() / n;
                    let mgy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n;
                    let inv = inv_std[r];
                    for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = inv * (gv - mg - yv * mgy);
                    }
                }
                self.acc(grads, *x, ga);
            }
            Op::Slice { x, r0, c0 } => {
                let shape = self.value(*x).shape();
                accumulate_with(grads, *x, shape, |acc, beta| {
                    if beta == 0.0 {
                        acc.as_mut_slice().fill(0.0);
                    }
                    for r in 0..g.rows() {
                        let dst = &mut acc.row_mut(r0 + r)[*c0..c0 + g.cols()];
                        for (d, s) in dst.iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                });
            }
            Op::Gather { x, index } => {
                let shape = self.value(*x).shape();
                accumulate_with(grads, *x, shape, |acc, beta| {
                    if beta == 0.0 {
                        acc.as_mut_slice().fill(0.0);
                    }
                    let dst = acc.as_mut_slice();
                    for (&i, &gv) in index.iter().zip(g.as_slice()) {
                        dst[i] += gv;
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.value(p).shape();
                    if self.rg(p) {
                        let slice = g.as_slice()[offset * cols..(offset + rows) * cols].to_vec();
                        self.acc(grads, p, Matrix::from_vec(rows, cols, slice).unwrap());
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.value(p).shape();
                    if self.rg(p) {
                        let part =
                            Matrix::from_fn(rows, cols, |r, c| g.get(r, offset + c));
                        self.acc(grads, p, part);
                    }
                    offset += cols;
                }
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                self.acc(grads, *a, Matrix::filled(r, c, g.as_slice()[0]));
            }
            Op::SumSquares(a) => {
                let s = 2.0 * g.as_slice()[0];
                self.acc(grads, *a, self.value(*a).scale(s));
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Matrix> = inputs.iter().map(|&v| self.value(v)).collect();
                let input_grads = op.backward(&values, y, g);
                debug_assert_eq!(input_grads.len(), inputs.len());
                for (&v, gv) in inputs.iter().zip(input_grads) {
                    self.acc(grads, v, gv);
                }
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

/// Runs `f(acc, beta)` against the existing gradient (beta = 1) or a fresh
/// buffer (beta = 0).
fn accumulate_with(
    grads: &mut [Option<Matrix>],
    v: Var,
    shape: (usize, usize),
    f: impl FnOnce(&mut Matrix, f64),
) {
    match &mut grads[v.0] {
        Some(existing) => f(existing, 1.0),
        slot @ None => {
            let mut m = Matrix::zeros(shape.0, shape.1);
            f(&mut m, 0.0);
            *slot = Some(m);
        }
    }
}

fn zip(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    a.zip_map(b, f).expect("adjoint shapes agree")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng;

    #[test]
    fn softmax_uniform_row() {
        let y = softmax_rows(&Matrix::zeros(1, 3), 1.0).unwrap();
        for &v in y.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_low_temperature_limit() {
        let x = Matrix::row_vector(&[10.0, 0.0, 0.0]);
        let y = softmax_rows(&x, 0.01).unwrap();
        assert!((y.get(0, 0) - 1.0).abs() < 1e-9);
        assert!(y.get(0, 1) < 1e-9 && y.get(0, 2) < 1e-9);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let x = Matrix::row_vector(&[1.0, 2.0, 3.0]);
        let y = softmax_rows(&x, 1.0).unwrap();
        let z: f64 = [1f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in [1f64, 2.0, 3.0].iter().enumerate() {
            assert!((y.get(0, i) - v.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_positive_temperature() {
        assert!(softmax_rows(&Matrix::zeros(1, 2), 0.0).is_err());
        assert!(softmax_rows(&Matrix::zeros(1, 2), -1.0).is_err());
    }

    #[test]
    fn unused_leaf_gets_exact_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::filled(2, 2, 1.5));
        let unused = tape.leaf(Matrix::filled(3, 1, 2.0));
        let s = tape.sum_squares(a);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &Matrix::zeros(3, 1));
        assert_eq!(grads.get(a).unwrap(), &Matrix::filled(2, 2, 3.0));
    }

    #[test]
    fn shared_input_accumulates() {
        // f = sum(a * a) through two paths
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::row_vector(&[1.0, -2.0]));
        let m = tape.mul(a, a).unwrap();
        let s = tape.sum(m);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().as_slice(), &[2.0, -4.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let mut r = rng::seeded(1);
        let a = tape.leaf(rng::normal_matrix(&mut r, 2, 3, 1.0));
        let b = tape.constant(rng::normal_matrix(&mut r, 3, 2, 1.0));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert!(g.get(b).is_none());
        assert!(g.get(a).is_some());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::zeros(2, 2));
        assert!(tape.backward(a).is_err());
    }
}
