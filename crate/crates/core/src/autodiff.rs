//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the nodes in reverse insertion order and
//! accumulates gradients into every node that depends on a leaf created with
//! [`Graph::param`]. Nodes built only from constants are never visited.
//!
//! The op set is deliberately small: affine maps, `tanh`, elementwise
//! arithmetic, column concatenation/slicing, row gather/scatter and the
//! reductions needed by the L1 loss. Reductions run in index order so
//! repeated runs are bit-identical.

use std::rc::Rc;

use crate::error::{FenError, Result};

/// A dense row-major matrix. Scalars are `1 x 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(FenError::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![value] }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Rc<[f64]>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows(Var, Rc<[usize]>),
    ScatterAddRows(Var, Rc<[usize]>),
    Reshape(Var),
    Sum(Var),
    Abs(Var),
    LinComb { base: Var, terms: Vec<(f64, Var)> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(what: &str, a: [usize; 2], b: [usize; 2]) -> FenError {
    FenError::ShapeMismatch(format!("{what}: {}x{} vs {}x{}", a[0], a[1], b[0], b[1]))
}

/// `c = alpha * a * b^T + beta * c` with `a: m x k`, `b: n x k`.
fn gemm_abt(alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64], m: usize, k: usize, n: usize) {
    // SAFETY: slice lengths are m*k, n*k and m*n, matching the strides.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, alpha,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c = alpha * a * b + beta * c` with `a: m x k`, `b: k x n`.
fn gemm_ab(alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64], m: usize, k: usize, n: usize) {
    // SAFETY: slice lengths are m*k, k*n and m*n, matching the strides.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, alpha,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c = alpha * a^T * b + beta * c` with `a: k x m`, `b: k x n`.
fn gemm_atb(alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64], m: usize, k: usize, n: usize) {
    // SAFETY: slice lengths are k*m, k*n and m*n, matching the strides.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, alpha,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node created after the graph had `len` nodes.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(FenError::NonFiniteOutput(name.to_string()));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        let v = self.push(value, Op::Leaf, "param")?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    /// A leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, "constant")
    }

    /// `x W^T + b` for `x: B x in`, `W: out x in`, `b: 1 x out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [batch, inp] = self.shape(x);
        let [out, w_in] = self.shape(w);
        if w_in != inp {
            return Err(shape_err("affine input", self.shape(x), self.shape(w)));
        }
        if self.shape(b) != [1, out] {
            return Err(shape_err("affine bias", self.shape(b), [1, out]));
        }
        let mut y = vec![0.0; batch * out];
        let bias = self.value(b).data();
        for row in y.chunks_exact_mut(out) {
            row.copy_from_slice(bias);
        }
        gemm_abt(1.0, self.value(x).data(), self.value(w).data(), 1.0, &mut y, batch, inp, out);
        self.push(Tensor { rows: batch, cols: out, data: y }, Op::Affine { x, w, b }, "affine")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor { rows: v.rows, cols: v.cols, data: v.data.iter().map(|a| a.tanh()).collect() };
        self.push(t, Op::Tanh(x), "tanh")
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor { rows: va.rows, cols: va.cols, data };
        self.push(t, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor { rows: v.rows, cols: v.cols, data: v.data.iter().map(|a| c * a).collect() };
        self.push(t, Op::Scale(x, c), "scale")
    }

    /// Multiplies row `r` of `x` by `weights[r]`.
    pub fn scale_rows(&mut self, x: Var, weights: Rc<[f64]>) -> Result<Var> {
        let v = self.value(x);
        if weights.len() != v.rows {
            return Err(FenError::ShapeMismatch(format!(
                "{} row weights for {} rows",
                weights.len(),
                v.rows
            )));
        }
        let mut data = v.data.clone();
        for (row, w) in data.chunks_exact_mut(v.cols.max(1)).zip(weights.iter()) {
            row.iter_mut().for_each(|a| *a *= w);
        }
        let t = Tensor { rows: v.rows, cols: v.cols, data };
        self.push(t, Op::ScaleRows(x, weights), "scale_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.shape(p)[0]).unwrap_or(0);
        if let Some(&p) = parts.iter().find(|&&p| self.shape(p)[0] != rows) {
            return Err(shape_err("concat_cols", self.shape(p), [rows, 0]));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        self.push(Tensor { rows, cols, data }, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Columns `start..start + len` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if start + len > v.cols {
            return Err(FenError::ShapeMismatch(format!(
                "columns {start}..{} of a {}-column tensor",
                start + len,
                v.cols
            )));
        }
        let mut data = Vec::with_capacity(v.rows * len);
        for r in 0..v.rows {
            data.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let t = Tensor { rows: v.rows, cols: len, data };
        self.push(t, Op::SliceCols { x, start }, "slice_cols")
    }

    /// Row `r` of the result is row `idx[r]` of `x`.
    pub fn gather_rows(&mut self, x: Var, idx: Rc<[usize]>) -> Result<Var> {
        let v = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.rows) {
            return Err(FenError::ShapeMismatch(format!("gather row {bad} of {}", v.rows)));
        }
        let mut data = Vec::with_capacity(idx.len() * v.cols);
        for &i in idx.iter() {
            data.extend_from_slice(v.row(i));
        }
        let t = Tensor { rows: idx.len(), cols: v.cols, data };
        self.push(t, Op::GatherRows(x, idx), "gather_rows")
    }

    /// Adds row `r` of `x` into row `idx[r]` of an `n_rows` zero matrix.
    pub fn scatter_add_rows(&mut self, x: Var, idx: Rc<[usize]>, n_rows: usize) -> Result<Var> {
        let v = self.value(x);
        if idx.len() != v.rows {
            return Err(FenError::ShapeMismatch(format!(
                "{} scatter indices for {} rows",
                idx.len(),
                v.rows
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_rows) {
            return Err(FenError::ShapeMismatch(format!("scatter row {bad} of {n_rows}")));
        }
        let cols = v.cols;
        let mut data = vec![0.0; n_rows * cols];
        for (r, &i) in idx.iter().enumerate() {
            for (o, a) in data[i * cols..(i + 1) * cols].iter_mut().zip(v.row(r)) {
                *o += a;
            }
        }
        let t = Tensor { rows: n_rows, cols, data };
        self.push(t, Op::ScatterAddRows(x, idx), "scatter_add_rows")
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let v = self.value(x);
        if rows * cols != v.data.len() {
            return Err(shape_err("reshape", v.shape(), [rows, cols]));
        }
        let t = Tensor { rows, cols, data: v.data.clone() };
        self.push(t, Op::Reshape(x), "reshape")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor { rows: v.rows, cols: v.cols, data: v.data.iter().map(|a| a.abs()).collect() };
        self.push(t, Op::Abs(x), "abs")
    }

    /// `base + sum_i c_i * t_i`, accumulated left to right.
    pub fn lincomb(&mut self, base: Var, terms: &[(f64, Var)]) -> Result<Var> {
        let shape = self.shape(base);
        let mut data = self.value(base).data.clone();
        for &(c, t) in terms {
            if self.shape(t) != shape {
                return Err(shape_err("lincomb", self.shape(t), shape));
            }
            for (o, a) in data.iter_mut().zip(&self.value(t).data) {
                *o += c * a;
            }
        }
        let t = Tensor { rows: shape[0], cols: shape[1], data };
        self.push(t, Op::LinComb { base, terms: terms.to_vec() }, "lincomb")
    }

    /// Gradients of the scalar `output` with respect to every node that
    /// requires them.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(FenError::GraphNotRecorded(format!(
                "node {} is not part of this graph",
                output.0
            )));
        }
        if self.shape(output) != [1, 1] {
            let [r, c] = self.shape(output);
            return Err(FenError::GraphNotRecorded(format!(
                "backward needs a scalar output, got {r}x{c}"
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=output.0).map(|_| None).collect();
        if !self.nodes[output.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(Tensor::scalar(1.0));
        for i in (0..=output.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let like = |t: &Tensor, data: Vec<f64>| Tensor { rows: t.rows, cols: t.cols, data };
        match &node.op {
            Op::Leaf => {}
            &Op::Affine { x, w, b } => {
                let [batch, inp] = self.shape(x);
                let out = self.shape(w)[0];
                if self.needs(x) {
                    let mut dx = vec![0.0; batch * inp];
                    gemm_ab(1.0, &dy.data, &self.value(w).data, 0.0, &mut dx, batch, out, inp);
                    self.accumulate(grads, x, Tensor { rows: batch, cols: inp, data: dx });
                }
                if self.needs(w) {
                    let mut dw = vec![0.0; out * inp];
                    gemm_atb(1.0, &dy.data, &self.value(x).data, 0.0, &mut dw, out, batch, inp);
                    self.accumulate(grads, w, Tensor { rows: out, cols: inp, data: dw });
                }
                if self.needs(b) {
                    let mut db = vec![0.0; out];
                    for row in dy.data.chunks_exact(out) {
                        for (o, a) in db.iter_mut().zip(row) {
                            *o += a;
                        }
                    }
                    self.accumulate(grads, b, Tensor { rows: 1, cols: out, data: db });
                }
            }
            &Op::Tanh(x) => {
                let data = dy.data.iter().zip(&node.value.data).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(grads, x, like(dy, data));
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, dy.clone());
                self.accumulate(grads, b, dy.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, dy.clone());
                if self.needs(b) {
                    self.accumulate(grads, b, like(dy, dy.data.iter().map(|g| -g).collect()));
                }
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    let data = dy.data.iter().zip(&self.value(b).data).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, a, like(dy, data));
                }
                if self.needs(b) {
                    let data = dy.data.iter().zip(&self.value(a).data).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, b, like(dy, data));
                }
            }
            &Op::Scale(x, c) => {
                self.accumulate(grads, x, like(dy, dy.data.iter().map(|g| c * g).collect()));
            }
            Op::ScaleRows(x, weights) => {
                let mut data = dy.data.clone();
                for (row, w) in data.chunks_exact_mut(dy.cols.max(1)).zip(weights.iter()) {
                    row.iter_mut().for_each(|a| *a *= w);
                }
                self.accumulate(grads, *x, like(dy, data));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let [rows, cols] = self.shape(p);
                    if self.needs(p) {
                        let mut data = Vec::with_capacity(rows * cols);
                        for r in 0..rows {
                            data.extend_from_slice(&dy.row(r)[offset..offset + cols]);
                        }
                        self.accumulate(grads, p, Tensor { rows, cols, data });
                    }
                    offset += cols;
                }
            }
            &Op::SliceCols { x, start } => {
                let [rows, cols] = self.shape(x);
                let mut data = vec![0.0; rows * cols];
                for r in 0..rows {
                    data[r * cols + start..r * cols + start + dy.cols].copy_from_slice(dy.row(r));
                }
                self.accumulate(grads, x, Tensor { rows, cols, data });
            }
            Op::GatherRows(x, idx) => {
                let [rows, cols] = self.shape(*x);
                let mut data = vec![0.0; rows * cols];
                for (r, &i) in idx.iter().enumerate() {
                    for (o, g) in data[i * cols..(i + 1) * cols].iter_mut().zip(dy.row(r)) {
                        *o += g;
                    }
                }
                self.accumulate(grads, *x, Tensor { rows, cols, data });
            }
            Op::ScatterAddRows(x, idx) => {
                let cols = dy.cols;
                let mut data = Vec::with_capacity(idx.len() * cols);
                for &i in idx.iter() {
                    data.extend_from_slice(dy.row(i));
                }
                self.accumulate(grads, *x, Tensor { rows: idx.len(), cols, data });
            }
            &Op::Reshape(x) => {
                let [rows, cols] = self.shape(x);
                self.accumulate(grads, x, Tensor { rows, cols, data: dy.data.clone() });
            }
            &Op::Sum(x) => {
                let [rows, cols] = self.shape(x);
                self.accumulate(grads, x, Tensor { rows, cols, data: vec![dy.data[0]; rows * cols] });
            }
            &Op::Abs(x) => {
                let data = dy
                    .data
                    .iter()
                    .zip(&self.value(x).data)
                    .map(|(g, a)| if *a > 0.0 { *g } else if *a < 0.0 { -g } else { 0.0 })
                    .collect();
                self.accumulate(grads, x, like(dy, data));
            }
            Op::LinComb { base, terms } => {
                self.accumulate(grads, *base, dy.clone());
                for &(c, t) in terms {
                    if self.needs(t) && c != 0.0 {
                        self.accumulate(grads, t, like(dy, dy.data.iter().map(|g| c * g).collect()));
                    }
                }
            }
        }
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        &Op::Affine { x, w, b } => vec![x, w, b],
        &Op::Tanh(x) | &Op::Scale(x, _) | &Op::SliceCols { x, .. } | &Op::Reshape(x) | &Op::Sum(x) | &Op::Abs(x) => vec![x],
        Op::ScaleRows(x, _) | Op::GatherRows(x, _) | Op::ScatterAddRows(x, _) => vec![*x],
        &Op::Add(a, b) | &Op::Sub(a, b) | &Op::Mul(a, b) => vec![a, b],
        Op::ConcatCols(parts) => parts.clone(),
        Op::LinComb { base, terms } => std::iter::once(*base).chain(terms.iter().map(|t| t.1)).collect(),
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` if the output does not
    /// depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`, zeros of `like`'s shape when absent.
    pub fn get_or_zeros(&self, v: Var, shape: [usize; 2]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape[0], shape[1]))
    }
}
