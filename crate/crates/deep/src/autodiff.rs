//! Define-by-run reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation together with its output. Calling
//! [`Tape::backward`] on a `1 x 1` node walks the records in reverse order and
//! accumulates vector–Jacobian products. Nodes that do not depend on any
//! trainable leaf are skipped.
//!
//! Broadcasting is limited to `1 x 1` values and row-vector biases.
//! At the kinks of `y^+` and `y^-` the derivative of the right branch (`y > 0`) is used.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("loss must be 1x1, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("invalid tensor: {0}")]
    Invalid(String),
}

/// Row-major matrix; vectors are `1 x n` or `n x 1`, scalars `1 x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AutodiffError> {
        if data.len() != rows * cols {
            return Err(AutodiffError::Invalid(format!(
                "{rows}x{cols} tensor needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// The single value of a `1 x 1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    fn add_assign(&mut self, other: &[f64]) {
        for (a, b) in self.data.iter_mut().zip(other) {
            *a += b;
        }
    }
}

/// `c = a b` (or `c += a b` when `accumulate`), with explicit strides so
/// transposed operands need no copies.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert_eq!(c.len(), m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the assertions above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Handle of a recorded node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    PosPart(Var),
    NegPart(Var),
    Broadcast(Var),
    Sum(Var),
    Mean(Var),
    Square(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    RowSum(Var),
    /// Elementwise map with derivatives saved at record time.
    Map(Var, Vec<f64>),
    /// LSTM gate activations and state update; saves `[i, f, g, o, tanh c]`.
    LstmPointwise { z: Var, c_prev: Var, hidden: usize, saved: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Record of one forward evaluation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every recorded node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of `v`; zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0].take().unwrap_or_else(|| {
            let (r, c) = self.shapes[v.0];
            Tensor::zeros(r, c)
        })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), AutodiffError> {
    if a.shape() != b.shape() {
        return Err(AutodiffError::Shape {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, rec: Op) -> Result<Var, AutodiffError> {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(op, x, y)?;
        let data = x.data.iter().zip(&y.data).map(|(p, q)| f(*p, *q)).collect();
        let value = Tensor {
            rows: x.rows,
            cols: x.cols,
            data,
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, rec, needs))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, rec: Op) -> Var {
        let x = &self.nodes[a.0].value;
        let value = Tensor {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().map(|p| f(*p)).collect(),
        };
        let needs = self.needs(a);
        self.push(value, rec, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |p| s * p, Op::Scale(a, s))
    }

    /// Adds the `1 x n` row `bias` to every row of the `L x n` matrix `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (x, b) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        if b.rows != 1 || b.cols != x.cols {
            return Err(AutodiffError::Shape {
                op: "add_row",
                lhs: x.shape(),
                rhs: b.shape(),
            });
        }
        let mut value = x.clone();
        for row in value.data.chunks_exact_mut(x.cols) {
            for (v, bb) in row.iter_mut().zip(&b.data) {
                *v += bb;
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(value, Op::AddRow(a, bias), needs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if x.cols != y.rows {
            return Err(AutodiffError::Shape {
                op: "matmul",
                lhs: x.shape(),
                rhs: y.shape(),
            });
        }
        let (m, k, n) = (x.rows, x.cols, y.cols);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &x.data, (k, 1), &y.data, (n, 1), &mut out, false);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { rows: m, cols: n, data: out }, Op::MatMul(a, b), needs))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `y^+ = max(y, 0)`.
    pub fn pos_part(&mut self, a: Var) -> Var {
        self.unary(a, |p| p.max(0.0), Op::PosPart(a))
    }

    /// `y^- = max(-y, 0)`.
    pub fn neg_part(&mut self, a: Var) -> Var {
        self.unary(a, |p| (-p).max(0.0), Op::NegPart(a))
    }

    /// Repeats a `1 x 1` value into a `rows x cols` matrix.
    pub fn broadcast(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, AutodiffError> {
        let x = &self.nodes[a.0].value;
        if x.shape() != (1, 1) {
            return Err(AutodiffError::Shape {
                op: "broadcast",
                lhs: x.shape(),
                rhs: (1, 1),
            });
        }
        let value = Tensor::filled(rows, cols, x.data[0]);
        let needs = self.needs(a);
        Ok(self.push(value, Op::Broadcast(a), needs))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data.iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let s = x.data.iter().sum::<f64>() / x.data.len() as f64;
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Mean(a), needs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |p| p * p, Op::Square(a))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let rows = self.nodes[parts[0].0].value.rows;
        let mut cols = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.rows != rows {
                return Err(AutodiffError::Shape {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].value.shape(),
                    rhs: t.shape(),
                });
            }
            cols += t.cols;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(i));
            }
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(Tensor { rows, cols, data }, Op::ConcatCols(parts.to_vec()), needs))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let x = &self.nodes[a.0].value;
        if start >= end || end > x.cols {
            return Err(AutodiffError::Shape {
                op: "slice_cols",
                lhs: x.shape(),
                rhs: (start, end),
            });
        }
        let width = end - start;
        let mut data = Vec::with_capacity(x.rows * width);
        for i in 0..x.rows {
            data.extend_from_slice(&x.row(i)[start..end]);
        }
        let value = Tensor {
            rows: x.rows,
            cols: width,
            data,
        };
        let needs = self.needs(a);
        Ok(self.push(value, Op::SliceCols(a, start), needs))
    }

    /// `L x n -> L x 1` sums along each row.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let data = x.data.chunks_exact(x.cols.max(1)).map(|r| r.iter().sum()).collect();
        let value = Tensor {
            rows: x.rows,
            cols: 1,
            data,
        };
        let needs = self.needs(a);
        self.push(value, Op::RowSum(a), needs)
    }

    /// Elementwise `f` with user-supplied derivative `df`.
    pub fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Var {
        let x = &self.nodes[a.0].value;
        let value = Tensor {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().map(|p| f(*p)).collect(),
        };
        let d = x.data.iter().map(|p| df(*p)).collect();
        let needs = self.needs(a);
        self.push(value, Op::Map(a, d), needs)
    }

    /// Elementwise map whose closure sees the flat index and returns
    /// `(value, derivative)`; used for per-row coefficients.
    pub fn map_indexed(&mut self, a: Var, f: impl Fn(usize, f64) -> (f64, f64)) -> Var {
        let x = &self.nodes[a.0].value;
        let (rows, cols) = x.shape();
        let mut data = Vec::with_capacity(x.data.len());
        let mut d = Vec::with_capacity(x.data.len());
        for (i, p) in x.data.iter().enumerate() {
            let (v, dv) = f(i, *p);
            data.push(v);
            d.push(dv);
        }
        let needs = self.needs(a);
        self.push(Tensor { rows, cols, data }, Op::Map(a, d), needs)
    }

    /// Pointwise part of an LSTM cell. `z` (`L x 4h`) holds the gate
    /// pre-activations in the order `[input, forget, candidate, output]`;
    /// returns `[h | c]` (`L x 2h`) with
    /// `c = sigmoid(z_f) c_prev + sigmoid(z_i) tanh(z_g)` and
    /// `h = sigmoid(z_o) tanh(c)`.
    pub fn lstm_pointwise(&mut self, z: Var, c_prev: Var) -> Result<Var, AutodiffError> {
        let (zt, ct) = (&self.nodes[z.0].value, &self.nodes[c_prev.0].value);
        let h = ct.cols;
        if zt.rows != ct.rows || zt.cols != 4 * h {
            return Err(AutodiffError::Shape {
                op: "lstm_pointwise",
                lhs: zt.shape(),
                rhs: ct.shape(),
            });
        }
        let rows = zt.rows;
        let mut out = vec![0.0; rows * 2 * h];
        let mut saved = vec![0.0; rows * 5 * h];
        for l in 0..rows {
            let zr = &zt.data[l * 4 * h..(l + 1) * 4 * h];
            let cr = &ct.data[l * h..(l + 1) * h];
            let sv = &mut saved[l * 5 * h..(l + 1) * 5 * h];
            let (hc, cc) = out[l * 2 * h..(l + 1) * 2 * h].split_at_mut(h);
            for k in 0..h {
                let i = sigmoid(zr[k]);
                let f = sigmoid(zr[h + k]);
                let g = tanh(zr[2 * h + k]);
                let o = sigmoid(zr[3 * h + k]);
                let c = f * cr[k] + i * g;
                let tc = tanh(c);
                cc[k] = c;
                hc[k] = o * tc;
                sv[k] = i;
                sv[h + k] = f;
                sv[2 * h + k] = g;
                sv[3 * h + k] = o;
                sv[4 * h + k] = tc;
            }
        }
        let needs = self.needs(z) || self.needs(c_prev);
        let value = Tensor {
            rows,
            cols: 2 * h,
            data: out,
        };
        Ok(self.push(value, Op::LstmPointwise { z, c_prev, hidden: h, saved }, needs))
    }

    /// Reverse pass from the `1 x 1` node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let shape = self.nodes[loss.0].value.shape();
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for k in (0..n).rev() {
            let node = &self.nodes[k];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[k].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[k] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, data: Vec<f64>, rows: usize, cols: usize| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&data),
                slot @ None => *slot = Some(Tensor { rows, cols, data }),
            }
        };
        let elementwise = |d: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..g.data.len()).map(|i| g.data[i] * d(i)).collect() };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.data.clone(), g.rows, g.cols);
                acc(*b, g.data.clone(), g.rows, g.cols);
            }
            Op::Sub(a, b) => {
                acc(*a, g.data.clone(), g.rows, g.cols);
                acc(*b, g.data.iter().map(|x| -x).collect(), g.rows, g.cols);
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                if self.nodes[a.0].needs_grad {
                    acc(*a, elementwise(&|i| y.data[i]), g.rows, g.cols);
                }
                if self.nodes[b.0].needs_grad {
                    acc(*b, elementwise(&|i| x.data[i]), g.rows, g.cols);
                }
            }
            Op::Scale(a, s) => acc(*a, g.data.iter().map(|x| s * x).collect(), g.rows, g.cols),
            Op::AddRow(a, bias) => {
                acc(*a, g.data.clone(), g.rows, g.cols);
                if self.nodes[bias.0].needs_grad {
                    let mut db = vec![0.0; g.cols];
                    for row in g.data.chunks_exact(g.cols) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    acc(*bias, db, 1, g.cols);
                }
            }
            Op::MatMul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let (m, k, n) = (x.rows, x.cols, y.cols);
                if self.nodes[a.0].needs_grad {
                    // dA = G B^T
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, &g.data, (n, 1), &y.data, (1, n), &mut da, false);
                    acc(*a, da, m, k);
                }
                if self.nodes[b.0].needs_grad {
                    // dB = A^T G
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, &x.data, (1, k), &g.data, (n, 1), &mut db, false);
                    acc(*b, db, k, n);
                }
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(*a, elementwise(&|i| 1.0 - y.data[i] * y.data[i]), g.rows, g.cols);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, elementwise(&|i| y.data[i] * (1.0 - y.data[i])), g.rows, g.cols);
            }
            Op::PosPart(a) => {
                let x = val(*a);
                acc(*a, elementwise(&|i| if x.data[i] >= 0.0 { 1.0 } else { 0.0 }), g.rows, g.cols);
            }
            Op::NegPart(a) => {
                let x = val(*a);
                acc(*a, elementwise(&|i| if x.data[i] >= 0.0 { 0.0 } else { -1.0 }), g.rows, g.cols);
            }
            Op::Broadcast(a) => acc(*a, vec![g.data.iter().sum()], 1, 1),
            Op::Sum(a) => {
                let x = val(*a);
                acc(*a, vec![g.data[0]; x.data.len()], x.rows, x.cols);
            }
            Op::Mean(a) => {
                let x = val(*a);
                let w = g.data[0] / x.data.len() as f64;
                acc(*a, vec![w; x.data.len()], x.rows, x.cols);
            }
            Op::Square(a) => {
                let x = val(*a);
                acc(*a, elementwise(&|i| 2.0 * x.data[i]), g.rows, g.cols);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols;
                    if self.nodes[p.0].needs_grad {
                        let mut d = Vec::with_capacity(g.rows * w);
                        for row in g.data.chunks_exact(g.cols) {
                            d.extend_from_slice(&row[offset..offset + w]);
                        }
                        acc(*p, d, g.rows, w);
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let x = val(*a);
                let mut d = vec![0.0; x.data.len()];
                for (i, row) in g.data.chunks_exact(g.cols).enumerate() {
                    d[i * x.cols + start..i * x.cols + start + g.cols].copy_from_slice(row);
                }
                acc(*a, d, x.rows, x.cols);
            }
            Op::RowSum(a) => {
                let x = val(*a);
                let mut d = Vec::with_capacity(x.data.len());
                for gi in &g.data {
                    d.extend(std::iter::repeat(*gi).take(x.cols));
                }
                acc(*a, d, x.rows, x.cols);
            }
            Op::Map(a, deriv) => acc(*a, elementwise(&|i| deriv[i]), g.rows, g.cols),
            Op::LstmPointwise { z, c_prev, hidden, saved } => {
                let h = *hidden;
                let cp = val(*c_prev);
                let rows = g.rows;
                let mut dz = vec![0.0; rows * 4 * h];
                let mut dcp = vec![0.0; rows * h];
                for l in 0..rows {
                    let gr = &g.data[l * 2 * h..(l + 1) * 2 * h];
                    let sv = &saved[l * 5 * h..(l + 1) * 5 * h];
                    for k in 0..h {
                        let (i, f, gg, o, tc) = (sv[k], sv[h + k], sv[2 * h + k], sv[3 * h + k], sv[4 * h + k]);
                        let (dh, dc_out) = (gr[k], gr[h + k]);
                        let dc = dc_out + dh * o * (1.0 - tc * tc);
                        let row = &mut dz[l * 4 * h..(l + 1) * 4 * h];
                        row[k] = dc * gg * i * (1.0 - i);
                        row[h + k] = dc * cp.data[l * h + k] * f * (1.0 - f);
                        row[2 * h + k] = dc * i * (1.0 - gg * gg);
                        row[3 * h + k] = dh * tc * o * (1.0 - o);
                        dcp[l * h + k] = dc * f;
                    }
                }
                acc(*z, dz, rows, 4 * h);
                acc(*c_prev, dcp, rows, h);
            }
        }
    }
}

/// `tanh` through a single `exp`, which is markedly cheaper than the libm
/// routine; the absolute error stays at the level of a few ulps of 1.
#[inline]
pub fn tanh(x: f64) -> f64 {
    let e = (-2.0 * x.abs()).exp();
    let t = (1.0 - e) / (1.0 + e);
    t.copysign(x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_slope_at_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        let y = tape.tanh(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).item(), 1.0);
    }

    #[test]
    fn recovery_closeout_slopes() {
        for (y0, slope) in [(1.0, 0.4), (-1.0, 1.0), (0.0, 0.4)] {
            let mut tape = Tape::new();
            let y = tape.param(Tensor::scalar(y0));
            let p = tape.pos_part(y);
            let n = tape.neg_part(y);
            let rp = tape.scale(p, 0.4);
            let f = tape.sub(rp, n).unwrap();
            let g = tape.backward(f).unwrap();
            assert_eq!(g.get(y).item(), slope, "y={y0}");
        }
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::from_fn(3, 2, |i, j| (i * 2 + j) as f64));
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(p).data(), &[1.0; 6]);
    }

    #[test]
    fn zero_times_function_gives_zero_gradient() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::from_fn(2, 2, |i, j| 0.3 + (i + j) as f64));
        let t = tape.tanh(p);
        let s = tape.sum(t);
        let z = tape.scale(s, 0.0);
        let g = tape.backward(z).unwrap();
        assert!(g.get(p).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unreached_parameter_gets_zeros() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::scalar(2.0));
        let q = tape.param(Tensor::zeros(2, 3));
        let s = tape.square(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(p).item(), 4.0);
        assert_eq!(g.get(q), Tensor::zeros(2, 3));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::zeros(2, 1));
        assert_eq!(tape.backward(p).unwrap_err(), AutodiffError::NonScalarLoss((2, 1)));
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::zeros(2, 3));
        let b = tape.param(Tensor::zeros(2, 3));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::Shape {
                op: "matmul",
                lhs: (2, 3),
                rhs: (2, 3)
            }
        );
        assert!(err.to_string().contains("(2, 3) vs (2, 3)"));
        let c = tape.param(Tensor::zeros(3, 2));
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::filled(2, 2, 3.0));
        let p = tape.param(Tensor::filled(2, 2, 2.0));
        let m = tape.mul(c, p).unwrap();
        let s = tape.sum(m);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(p).data(), &[3.0; 4]);
        assert_eq!(g.get(c).data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_values() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let b = tape.constant(Tensor::new(3, 1, vec![1.0, 0.0, -1.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[-2.0, -2.0]);
    }

    #[test]
    fn tanh_matches_libm() {
        for k in -400..=400 {
            let x = k as f64 * 0.05;
            assert!((tanh(x) - x.tanh()).abs() < 4e-16, "{x}");
        }
        assert_eq!(tanh(0.0), 0.0);
        assert_eq!(tanh(1e3), 1.0);
        assert_eq!(tanh(-1e3), -1.0);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(800.0), 1.0);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
    }
}
