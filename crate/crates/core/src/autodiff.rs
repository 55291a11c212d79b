//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Tape`] records primitive operations in execution order. Batched
//! quantities are laid out one environment per row, so most primitives act
//! row-wise. [`Tape::backward`] replays the recording in exact reverse order
//! with a single fixed accumulation order, which makes gradients bitwise
//! reproducible.
//!
//! Besides the recorded primitives, a *custom link* node lets a caller supply
//! the Jacobian of an externally computed map. The backward pass then flows
//! through `J^T * adjoint` instead of through recorded primitives; the
//! trainers use this to substitute cheap model Jacobians for expensive ones.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::so3;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("operation {0} cannot be recorded through `record`")]
    UnsupportedOp(&'static str),
    #[error("backward root must be a 1x1 scalar, got {0}x{1}")]
    NonScalarRoot(usize, usize),
    #[error("variable {0} does not belong to this tape")]
    UnknownVar(usize),
    #[error("node {0} is not a custom link or {1} is not one of its inputs")]
    NotALink(usize, usize),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major matrix of `f64`. Scalars are 1x1, column vectors n x 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(AutodiffError::Shape { op: "tensor", detail: format!("{} values for a {rows}x{cols} tensor", data.len()) });
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![value] }
    }

    /// A 1 x n row.
    pub fn row(values: &[f64]) -> Self {
        Tensor { rows: 1, cols: values.len(), data: values.to_vec() }
    }

    /// An n x 1 column.
    pub fn column(values: &[f64]) -> Self {
        Tensor { rows: values.len(), cols: 1, data: values.to_vec() }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_slice_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    /// The single entry of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// Matrix product `self * rhs`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.cols != rhs.rows {
            return Err(AutodiffError::Shape { op: "matmul", detail: format!("{:?} x {:?}", self.shape(), rhs.shape()) });
        }
        let mut out = Tensor::zeros(self.rows, rhs.cols);
        gemm_acc(self.rows, self.cols, rhs.cols, 1.0, &self.data, (self.cols, 1), &rhs.data, (rhs.cols, 1), &mut out.data);
        Ok(out)
    }
}

/// `c += alpha * A * B` with explicit (row, col) strides for A and B; c is
/// row-major m x n.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: slice lengths cover every (row, col) addressed by the strides,
    // checked by the assertions below; c is exclusively borrowed.
    assert!(a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    assert!(b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    assert!(c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Handle to a node on a [`Tape`]. Cheap to copy; the value lives on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// Primitive operations the tape can record.
///
/// Row-wise ops treat each row as one sample: `Cross` works on n x 3 inputs,
/// `So3Exp` maps n x 3 rotation vectors to n x 9 column-major rotation
/// matrices, and `RowMatMul3` multiplies n x 9 stacks of 3x3 matrices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    MatMul,
    /// Matrix times column vector; same kernel as `MatMul`, stricter shapes.
    MatVec,
    Scale(f64),
    /// Adds a constant to every element.
    Offset(f64),
    Tanh,
    /// Sum of every element, 1x1 result.
    Sum,
    /// Per-row sum, n x 1 result.
    SumRows,
    ConcatCols,
    SliceCols {
        start: usize,
        len: usize,
    },
    /// Elementwise Huber loss with threshold `delta`.
    Huber {
        delta: f64,
    },
    Cross,
    Transpose,
    /// n x k plus a broadcast 1 x k row.
    AddRow,
    /// n x k times a broadcast 1 x k row, elementwise.
    MulRow,
    /// n x k times a broadcast n x 1 column, elementwise.
    MulCol,
    So3Exp,
    RowMatMul3,
    /// Externally computed map whose Jacobians are injected afterwards.
    CustomLink,
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::MatMul => "matmul",
            OpKind::MatVec => "matvec",
            OpKind::Scale(_) => "scale",
            OpKind::Offset(_) => "offset",
            OpKind::Tanh => "tanh",
            OpKind::Sum => "sum",
            OpKind::SumRows => "sum_rows",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SliceCols { .. } => "slice_cols",
            OpKind::Huber { .. } => "huber",
            OpKind::Cross => "cross",
            OpKind::Transpose => "transpose",
            OpKind::AddRow => "add_row",
            OpKind::MulRow => "mul_row",
            OpKind::MulCol => "mul_col",
            OpKind::So3Exp => "so3_exp",
            OpKind::RowMatMul3 => "row_matmul3",
            OpKind::CustomLink => "custom_link",
        }
    }
}

/// Jacobian attached to one input of a custom link.
#[derive(Clone, Debug)]
enum LinkJacobian {
    /// One `out_cols x in_cols` matrix applied to every row.
    Shared(Tensor),
    /// One row-major `out_cols x in_cols` block per row, stacked.
    PerRow(Vec<f64>),
}

#[derive(Clone, Debug)]
struct Node {
    op: OpKind,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
    links: Vec<(usize, LinkJacobian)>,
}

/// Recording of primitive operations, in topological (execution) order.
#[derive(Default, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by a backward pass, indexed by node id.
///
/// Only leaves keep their adjoints; interior adjoints are released as soon as
/// they have been propagated.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.adjoints.get(var.id).and_then(|a| a.as_ref())
    }

    /// Adjoint of `var`, zero when nothing reached it.
    pub fn wrt(&self, var: Var) -> Tensor {
        match self.get(var) {
            Some(t) => t.clone(),
            None => {
                let (r, c) = self.shapes[var.id];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn shape_err(op: OpKind, detail: String) -> AutodiffError {
    AutodiffError::Shape { op: op.name(), detail }
}

fn mat3(row: &[f64]) -> Matrix3<f64> {
    Matrix3::from_column_slice(row)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node; previously issued [`Var`]s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    /// Bytes held by node values and injected Jacobians.
    pub fn memory_bytes(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| {
                let links: usize = n
                    .links
                    .iter()
                    .map(|(_, j)| match j {
                        LinkJacobian::Shared(t) => t.len(),
                        LinkJacobian::PerRow(v) => v.len(),
                    })
                    .sum();
                (n.value.len() + links) * 8
            })
            .sum()
    }

    fn push(&mut self, op: OpKind, inputs: Vec<usize>, value: Tensor, requires_grad: bool) -> Var {
        let (rows, cols) = value.shape();
        let id = self.nodes.len();
        self.nodes.push(Node { op, inputs, value, requires_grad, links: Vec::new() });
        Var { id, rows, cols }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(OpKind::Leaf, Vec::new(), value, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.id].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.id].requires_grad
    }

    fn check(&self, var: Var) -> Result<&Tensor> {
        match self.nodes.get(var.id) {
            Some(n) if n.value.shape() == var.shape() => Ok(&n.value),
            _ => Err(AutodiffError::UnknownVar(var.id)),
        }
    }

    /// Records `op` applied to `inputs`, computing the output value.
    pub fn record(&mut self, op: OpKind, inputs: &[Var]) -> Result<Var> {
        let vals = inputs.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let arity = |n: usize| -> Result<()> {
            if vals.len() != n {
                Err(shape_err(op, format!("expected {n} inputs, got {}", vals.len())))
            } else {
                Ok(())
            }
        };
        let same_shape = |a: &Tensor, b: &Tensor| -> Result<()> {
            if a.shape() != b.shape() {
                Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
            } else {
                Ok(())
            }
        };
        let value = match op {
            OpKind::Leaf | OpKind::CustomLink => return Err(AutodiffError::UnsupportedOp(op.name())),
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                arity(2)?;
                same_shape(vals[0], vals[1])?;
                let (a, b) = (vals[0], vals[1]);
                let data = a
                    .data
                    .iter()
                    .zip(&b.data)
                    .map(|(x, y)| match op {
                        OpKind::Add => x + y,
                        OpKind::Sub => x - y,
                        _ => x * y,
                    })
                    .collect();
                Tensor { rows: a.rows, cols: a.cols, data }
            }
            OpKind::MatMul | OpKind::MatVec => {
                arity(2)?;
                if op == OpKind::MatVec && vals[1].cols != 1 {
                    return Err(shape_err(op, format!("rhs must be a column, got {:?}", vals[1].shape())));
                }
                vals[0].matmul(vals[1]).map_err(|_| shape_err(op, format!("{:?} x {:?}", vals[0].shape(), vals[1].shape())))?
            }
            OpKind::Scale(s) => {
                arity(1)?;
                vals[0].map(|x| s * x)
            }
            OpKind::Offset(s) => {
                arity(1)?;
                vals[0].map(|x| x + s)
            }
            OpKind::Tanh => {
                arity(1)?;
                vals[0].map(f64::tanh)
            }
            OpKind::Sum => {
                arity(1)?;
                Tensor::scalar(vals[0].sum())
            }
            OpKind::SumRows => {
                arity(1)?;
                let a = vals[0];
                let data = (0..a.rows).map(|r| a.row_slice(r).iter().sum()).collect();
                Tensor { rows: a.rows, cols: 1, data }
            }
            OpKind::ConcatCols => {
                if vals.is_empty() {
                    return Err(shape_err(op, "no inputs".into()));
                }
                let rows = vals[0].rows;
                if vals.iter().any(|v| v.rows != rows) {
                    return Err(shape_err(op, "row counts differ".into()));
                }
                let cols: usize = vals.iter().map(|v| v.cols).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for v in &vals {
                        data.extend_from_slice(v.row_slice(r));
                    }
                }
                Tensor { rows, cols, data }
            }
            OpKind::SliceCols { start, len } => {
                arity(1)?;
                let a = vals[0];
                if start + len > a.cols || len == 0 {
                    return Err(shape_err(op, format!("columns {start}..{} of {}", start + len, a.cols)));
                }
                let mut data = Vec::with_capacity(a.rows * len);
                for r in 0..a.rows {
                    data.extend_from_slice(&a.row_slice(r)[start..start + len]);
                }
                Tensor { rows: a.rows, cols: len, data }
            }
            OpKind::Huber { delta } => {
                arity(1)?;
                if !(delta > 0.0) {
                    return Err(shape_err(op, format!("delta must be positive, got {delta}")));
                }
                vals[0].map(|z| huber_scalar(z, delta))
            }
            OpKind::Cross => {
                arity(2)?;
                same_shape(vals[0], vals[1])?;
                if vals[0].cols != 3 {
                    return Err(shape_err(op, "rows must be 3-vectors".into()));
                }
                let (a, b) = (vals[0], vals[1]);
                let mut out = Tensor::zeros(a.rows, 3);
                for r in 0..a.rows {
                    let c = Vector3::from_row_slice(a.row_slice(r)).cross(&Vector3::from_row_slice(b.row_slice(r)));
                    out.row_slice_mut(r).copy_from_slice(c.as_slice());
                }
                out
            }
            OpKind::Transpose => {
                arity(1)?;
                vals[0].transpose()
            }
            OpKind::AddRow | OpKind::MulRow => {
                arity(2)?;
                let (a, b) = (vals[0], vals[1]);
                if b.rows != 1 || b.cols != a.cols {
                    return Err(shape_err(op, format!("{:?} with row {:?}", a.shape(), b.shape())));
                }
                let mut out = a.clone();
                for r in 0..a.rows {
                    for (x, y) in out.row_slice_mut(r).iter_mut().zip(&b.data) {
                        if op == OpKind::AddRow {
                            *x += y;
                        } else {
                            *x *= y;
                        }
                    }
                }
                out
            }
            OpKind::MulCol => {
                arity(2)?;
                let (a, b) = (vals[0], vals[1]);
                if b.cols != 1 || b.rows != a.rows {
                    return Err(shape_err(op, format!("{:?} with column {:?}", a.shape(), b.shape())));
                }
                let mut out = a.clone();
                for r in 0..a.rows {
                    let s = b.data[r];
                    out.row_slice_mut(r).iter_mut().for_each(|x| *x *= s);
                }
                out
            }
            OpKind::So3Exp => {
                arity(1)?;
                let a = vals[0];
                if a.cols != 3 {
                    return Err(shape_err(op, "rows must be rotation vectors".into()));
                }
                let mut out = Tensor::zeros(a.rows, 9);
                for r in 0..a.rows {
                    let e = so3::exp(&Vector3::from_row_slice(a.row_slice(r)));
                    out.row_slice_mut(r).copy_from_slice(e.as_slice());
                }
                out
            }
            OpKind::RowMatMul3 => {
                arity(2)?;
                same_shape(vals[0], vals[1])?;
                if vals[0].cols != 9 {
                    return Err(shape_err(op, "rows must be 3x3 matrices".into()));
                }
                let (a, b) = (vals[0], vals[1]);
                let mut out = Tensor::zeros(a.rows, 9);
                for r in 0..a.rows {
                    let c = mat3(a.row_slice(r)) * mat3(b.row_slice(r));
                    out.row_slice_mut(r).copy_from_slice(c.as_slice());
                }
                out
            }
        };
        let requires_grad = inputs.iter().any(|v| self.nodes[v.id].requires_grad);
        Ok(self.push(op, inputs.iter().map(|v| v.id).collect(), value, requires_grad))
    }

    fn op(&mut self, op: OpKind, inputs: &[Var]) -> Var {
        match self.record(op, inputs) {
            Ok(v) => v,
            Err(e) => panic!("{e}"),
        }
    }

    // Infallible conveniences; they panic on shape errors, which are bugs in
    // the caller's graph construction. Use `record` for the checked form.

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.op(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.op(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.op(OpKind::Mul, &[a, b])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.op(OpKind::MatMul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.op(OpKind::Scale(s), &[a])
    }
    pub fn offset(&mut self, a: Var, s: f64) -> Var {
        self.op(OpKind::Offset(s), &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.op(OpKind::Tanh, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Var {
        self.op(OpKind::Sum, &[a])
    }
    pub fn sum_rows(&mut self, a: Var) -> Var {
        self.op(OpKind::SumRows, &[a])
    }
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        self.op(OpKind::ConcatCols, parts)
    }
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        self.op(OpKind::SliceCols { start, len }, &[a])
    }
    pub fn huber(&mut self, a: Var, delta: f64) -> Var {
        self.op(OpKind::Huber { delta }, &[a])
    }
    pub fn cross(&mut self, a: Var, b: Var) -> Var {
        self.op(OpKind::Cross, &[a, b])
    }
    pub fn transpose(&mut self, a: Var) -> Var {
        self.op(OpKind::Transpose, &[a])
    }
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        self.op(OpKind::AddRow, &[a, row])
    }
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        self.op(OpKind::MulRow, &[a, row])
    }
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        self.op(OpKind::MulCol, &[a, col])
    }
    pub fn so3_exp(&mut self, a: Var) -> Var {
        self.op(OpKind::So3Exp, &[a])
    }
    pub fn row_matmul3(&mut self, a: Var, b: Var) -> Var {
        self.op(OpKind::RowMatMul3, &[a, b])
    }

    /// Records a node whose value was computed outside the tape. Gradients
    /// reach `inputs` only through Jacobians attached with
    /// [`Tape::inject_jacobian`] or [`Tape::inject_row_jacobians`].
    pub fn custom_link(&mut self, inputs: &[Var], value: Tensor) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
            if v.rows != value.rows {
                return Err(shape_err(OpKind::CustomLink, format!("input rows {} vs output rows {}", v.rows, value.rows)));
            }
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.id].requires_grad);
        Ok(self.push(OpKind::CustomLink, inputs.iter().map(|v| v.id).collect(), value, requires_grad))
    }

    fn link_slot(&self, input: Var, output: Var) -> Result<usize> {
        self.check(input)?;
        self.check(output)?;
        let node = &self.nodes[output.id];
        if node.op != OpKind::CustomLink {
            return Err(AutodiffError::NotALink(output.id, input.id));
        }
        node.inputs.iter().position(|&i| i == input.id).ok_or(AutodiffError::NotALink(output.id, input.id))
    }

    /// Attaches `jacobian` (shape `output.cols x input.cols`) to the link,
    /// applied identically to every row: `adj(input) += adj(output) * J`.
    pub fn inject_jacobian(&mut self, input: Var, output: Var, jacobian: Tensor) -> Result<()> {
        let slot = self.link_slot(input, output)?;
        if jacobian.shape() != (output.cols, input.cols) {
            return Err(shape_err(
                OpKind::CustomLink,
                format!("jacobian {:?}, expected {:?}", jacobian.shape(), (output.cols, input.cols)),
            ));
        }
        self.nodes[output.id].links.push((slot, LinkJacobian::Shared(jacobian)));
        Ok(())
    }

    /// Attaches one row-major `output.cols x input.cols` Jacobian per row.
    pub fn inject_row_jacobians(&mut self, input: Var, output: Var, blocks: Vec<f64>) -> Result<()> {
        let slot = self.link_slot(input, output)?;
        let want = output.rows * output.cols * input.cols;
        if blocks.len() != want {
            return Err(shape_err(OpKind::CustomLink, format!("{} jacobian entries, expected {want}", blocks.len())));
        }
        self.nodes[output.id].links.push((slot, LinkJacobian::PerRow(blocks)));
        Ok(())
    }

    /// Gradient of the scalar `root` with respect to every leaf.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.check(root)?;
        if root.shape() != (1, 1) {
            return Err(AutodiffError::NonScalarRoot(root.rows, root.cols));
        }
        self.backward_seeded(root, Tensor::scalar(1.0))
    }

    /// Vector-Jacobian product: propagates `seed` as the adjoint of `root`.
    pub fn backward_seeded(&self, root: Var, seed: Tensor) -> Result<Gradients> {
        self.check(root)?;
        if seed.shape() != root.shape() {
            return Err(shape_err(OpKind::Leaf, format!("seed {:?} for root {:?}", seed.shape(), root.shape())));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; root.id + 1];
        adj[root.id] = Some(seed);
        for id in (0..=root.id).rev() {
            let node = &self.nodes[id];
            if node.op == OpKind::Leaf {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut adj);
        }
        let shapes = self.nodes[..=root.id].iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { adjoints: adj, shapes })
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let val = |i: usize| &self.nodes[node.inputs[i]].value;
        let wants = |i: usize| self.nodes[node.inputs[i]].requires_grad;
        let emit = |adj: &mut [Option<Tensor>], i: usize, f: &dyn Fn(&mut Tensor)| {
            let id = node.inputs[i];
            if !self.nodes[id].requires_grad {
                return;
            }
            let slot = &mut adj[id];
            if slot.is_none() {
                let (r, c) = self.nodes[id].value.shape();
                *slot = Some(Tensor::zeros(r, c));
            }
            f(slot.as_mut().unwrap());
        };
        match node.op {
            OpKind::Leaf => {}
            OpKind::Add => {
                emit(adj, 0, &|a| a.axpy(1.0, g));
                emit(adj, 1, &|a| a.axpy(1.0, g));
            }
            OpKind::Sub => {
                emit(adj, 0, &|a| a.axpy(1.0, g));
                emit(adj, 1, &|a| a.axpy(-1.0, g));
            }
            OpKind::Mul => {
                let (x, y) = (val(0), val(1));
                emit(adj, 0, &|a| a.data.iter_mut().zip(&g.data).zip(&y.data).for_each(|((a, g), y)| *a += g * y));
                emit(adj, 1, &|a| a.data.iter_mut().zip(&g.data).zip(&x.data).for_each(|((a, g), x)| *a += g * x));
            }
            OpKind::MatMul | OpKind::MatVec => {
                let (x, y) = (val(0), val(1));
                let (m, k, n) = (x.rows, x.cols, y.cols);
                if wants(0) {
                    // dX += G * Y^T
                    emit(adj, 0, &|a| gemm_acc(m, n, k, 1.0, &g.data, (n, 1), &y.data, (1, n), &mut a.data));
                }
                if wants(1) {
                    // dY += X^T * G
                    emit(adj, 1, &|a| gemm_acc(k, m, n, 1.0, &x.data, (1, k), &g.data, (n, 1), &mut a.data));
                }
            }
            OpKind::Scale(s) => emit(adj, 0, &|a| a.axpy(s, g)),
            OpKind::Offset(_) => emit(adj, 0, &|a| a.axpy(1.0, g)),
            OpKind::Tanh => {
                let y = &node.value;
                emit(adj, 0, &|a| a.data.iter_mut().zip(&g.data).zip(&y.data).for_each(|((a, g), y)| *a += g * (1.0 - y * y)));
            }
            OpKind::Sum => {
                let s = g.data[0];
                emit(adj, 0, &|a| a.data.iter_mut().for_each(|a| *a += s));
            }
            OpKind::SumRows => emit(adj, 0, &|a| {
                let c = a.cols;
                for r in 0..a.rows {
                    let s = g.data[r];
                    a.data[r * c..(r + 1) * c].iter_mut().for_each(|x| *x += s);
                }
            }),
            OpKind::ConcatCols => {
                let mut offset = 0;
                for i in 0..node.inputs.len() {
                    let w = val(i).cols;
                    let start = offset;
                    emit(adj, i, &|a| {
                        for r in 0..a.rows {
                            let src = &g.row_slice(r)[start..start + w];
                            a.row_slice_mut(r).iter_mut().zip(src).for_each(|(a, s)| *a += s);
                        }
                    });
                    offset += w;
                }
            }
            OpKind::SliceCols { start, len } => emit(adj, 0, &|a| {
                for r in 0..a.rows {
                    let dst = &mut a.row_slice_mut(r)[start..start + len];
                    dst.iter_mut().zip(g.row_slice(r)).for_each(|(a, s)| *a += s);
                }
            }),
            OpKind::Huber { delta } => {
                let x = val(0);
                emit(adj, 0, &|a| a.data.iter_mut().zip(&g.data).zip(&x.data).for_each(|((a, g), z)| *a += g * huber_slope(*z, delta)));
            }
            OpKind::Cross => {
                let (x, y) = (val(0), val(1));
                // d/dx (g . x cross y) = y cross g; d/dy = g cross x
                emit(adj, 0, &|a| {
                    for r in 0..a.rows {
                        let d = Vector3::from_row_slice(y.row_slice(r)).cross(&Vector3::from_row_slice(g.row_slice(r)));
                        a.row_slice_mut(r).iter_mut().zip(d.iter()).for_each(|(a, d)| *a += d);
                    }
                });
                emit(adj, 1, &|a| {
                    for r in 0..a.rows {
                        let d = Vector3::from_row_slice(g.row_slice(r)).cross(&Vector3::from_row_slice(x.row_slice(r)));
                        a.row_slice_mut(r).iter_mut().zip(d.iter()).for_each(|(a, d)| *a += d);
                    }
                });
            }
            OpKind::Transpose => emit(adj, 0, &|a| a.axpy(1.0, &g.transpose())),
            OpKind::AddRow => {
                emit(adj, 0, &|a| a.axpy(1.0, g));
                emit(adj, 1, &|a| {
                    for r in 0..g.rows {
                        a.data.iter_mut().zip(g.row_slice(r)).for_each(|(a, g)| *a += g);
                    }
                });
            }
            OpKind::MulRow => {
                let (x, w) = (val(0), val(1));
                emit(adj, 0, &|a| {
                    for r in 0..g.rows {
                        let gr = g.row_slice(r);
                        a.row_slice_mut(r).iter_mut().zip(gr).zip(&w.data).for_each(|((a, g), w)| *a += g * w);
                    }
                });
                emit(adj, 1, &|a| {
                    for r in 0..g.rows {
                        let (gr, xr) = (g.row_slice(r), x.row_slice(r));
                        a.data.iter_mut().zip(gr).zip(xr).for_each(|((a, g), x)| *a += g * x);
                    }
                });
            }
            OpKind::MulCol => {
                let (x, c) = (val(0), val(1));
                emit(adj, 0, &|a| {
                    for r in 0..g.rows {
                        let s = c.data[r];
                        a.row_slice_mut(r).iter_mut().zip(g.row_slice(r)).for_each(|(a, g)| *a += g * s);
                    }
                });
                emit(adj, 1, &|a| {
                    for r in 0..g.rows {
                        a.data[r] += g.row_slice(r).iter().zip(x.row_slice(r)).map(|(g, x)| g * x).sum::<f64>();
                    }
                });
            }
            OpKind::So3Exp => {
                let x = val(0);
                emit(adj, 0, &|a| {
                    for r in 0..g.rows {
                        let d = so3::exp_derivatives(&Vector3::from_row_slice(x.row_slice(r)));
                        let gr = g.row_slice(r);
                        for (i, di) in d.iter().enumerate() {
                            a.data[r * 3 + i] += di.as_slice().iter().zip(gr).map(|(d, g)| d * g).sum::<f64>();
                        }
                    }
                });
            }
            OpKind::RowMatMul3 => {
                let (x, y) = (val(0), val(1));
                emit(adj, 0, &|a| {
                    for r in 0..g.rows {
                        let d = mat3(g.row_slice(r)) * mat3(y.row_slice(r)).transpose();
                        a.row_slice_mut(r).iter_mut().zip(d.as_slice()).for_each(|(a, d)| *a += d);
                    }
                });
                emit(adj, 1, &|a| {
                    for r in 0..g.rows {
                        let d = mat3(x.row_slice(r)).transpose() * mat3(g.row_slice(r));
                        a.row_slice_mut(r).iter_mut().zip(d.as_slice()).for_each(|(a, d)| *a += d);
                    }
                });
            }
            OpKind::CustomLink => {
                for (slot, jac) in &node.links {
                    let in_cols = val(*slot).cols;
                    let out_cols = g.cols;
                    emit(adj, *slot, &|a| match jac {
                        LinkJacobian::Shared(j) => {
                            // dIn += G * J
                            gemm_acc(g.rows, out_cols, in_cols, 1.0, &g.data, (out_cols, 1), &j.data, (in_cols, 1), &mut a.data)
                        }
                        LinkJacobian::PerRow(blocks) => {
                            let bs = out_cols * in_cols;
                            for r in 0..g.rows {
                                let block = &blocks[r * bs..(r + 1) * bs];
                                let gr = g.row_slice(r);
                                let ar = a.row_slice_mut(r);
                                for (o, &go) in gr.iter().enumerate() {
                                    if go == 0.0 {
                                        continue;
                                    }
                                    let jrow = &block[o * in_cols..(o + 1) * in_cols];
                                    ar.iter_mut().zip(jrow).for_each(|(a, j)| *a += go * j);
                                }
                            }
                        }
                    });
                }
            }
        }
    }
}

/// Huber loss of a single residual.
pub fn huber_scalar(z: f64, delta: f64) -> f64 {
    let a = z.abs();
    if a <= delta {
        0.5 * z * z
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Derivative of [`huber_scalar`].
pub fn huber_slope(z: f64, delta: f64) -> f64 {
    if z.abs() <= delta {
        z
    } else {
        delta * z.signum()
    }
}
