//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Every operation appends a node to a [`Tape`]; the recording order is a
//! valid topological order, so [`Tape::backward`] simply walks the nodes in
//! reverse. A [`Var`] borrows its tape, which makes "clearing the tape
//! invalidates its vars" a compile-time guarantee: [`Tape::clear`] needs
//! `&mut Tape` and therefore cannot be called while any var is alive.
//!
//! Non-differentiable points use fixed conventions: ReLU and `abs` take
//! subgradient 0 at 0, `min`/`max` route the gradient to the first operand
//! on ties, and `clamp` passes the gradient through on the closed interior
//! `[lo, hi]`. Index-based ops (`gather`, `select`) treat their index/mask
//! arguments as constants.

#![allow(clippy::should_implement_trait)]

use std::cell::RefCell;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("operands of {0} were recorded on different tapes")]
    CrossTape(&'static str),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot((usize, usize)),
    #[error("invalid argument to {op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Sigmoid(usize),
    Abs(usize),
    Min(usize, usize),
    Max(usize, usize),
    Clamp(usize, f64, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Sum(usize),
    RowSums(usize),
    ColSums(usize),
    ColBroadcast(usize),
    RowBroadcast(usize),
    Select(Vec<bool>, usize, usize),
    MulConst(usize, Tensor),
    Gather(usize, Vec<usize>),
    Reshape(usize),
    Concat(Vec<usize>),
    Slice(usize, usize),
    Mse(usize, usize),
    L1Mean(usize, usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Recording of a computation; see the module docs.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.idx, self.value())
    }
}

/// Gradients of a scalar root with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// `∂root/∂v`; zeros when `v` does not influence the root.
    pub fn wrt(&self, v: &Var<'_>) -> Tensor {
        match &self.grads[v.idx] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.idx];
                Tensor::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Drops all recorded nodes.
    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
    }

    /// Records a leaf (input or constant).
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.var(Tensor::scalar(value))
    }

    pub fn vector(&self, values: &[f64]) -> Var<'_> {
        self.var(Tensor::vector(values))
    }

    fn push(&self, op: Op, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    fn shape(&self, idx: usize) -> (usize, usize) {
        self.nodes.borrow()[idx].value.shape()
    }

    /// Concatenates column vectors vertically.
    pub fn concat(&self, parts: &[Var<'_>]) -> Result<Var<'_>> {
        let mut data = Vec::new();
        let mut idxs = Vec::with_capacity(parts.len());
        {
            let nodes = self.nodes.borrow();
            for p in parts {
                if !std::ptr::eq(p.tape, self) {
                    return Err(AutodiffError::CrossTape("concat"));
                }
                let v = &nodes[p.idx].value;
                if v.cols() != 1 {
                    return Err(AutodiffError::Shape {
                        op: "concat",
                        lhs: v.shape(),
                        rhs: (v.rows(), 1),
                    });
                }
                data.extend_from_slice(v.data());
                idxs.push(p.idx);
            }
        }
        let n = data.len();
        Ok(self.push(Op::Concat(idxs), Tensor::new(n, 1, data)))
    }

    /// Reverse pass from a scalar root. Nodes are visited in exact reverse
    /// recording order.
    pub fn backward(&self, root: &Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(root.tape, self) {
            return Err(AutodiffError::CrossTape("backward"));
        }
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root.idx].value.shape();
        if root_shape != (1, 1) {
            return Err(AutodiffError::NonScalarRoot(root_shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.idx] = Some(Tensor::scalar(1.0));

        for i in (0..=root.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let val = |j: usize| &nodes[j].value;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(val(*b), |g, y| g * y);
                    let gb = g.zip_map(val(*a), |g, x| g * x);
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Div(a, b) => {
                    let ga = g.zip_map(val(*b), |g, y| g / y);
                    let gb = Tensor::new(
                        g.rows(),
                        g.cols(),
                        g.data()
                            .iter()
                            .zip(val(*a).data())
                            .zip(val(*b).data())
                            .map(|((&g, &x), &y)| if g == 0.0 { 0.0 } else { -g * x / (y * y) })
                            .collect(),
                    );
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Neg(a) => accumulate(&mut grads, *a, &g.map(|v| -v)),
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads, *a, &g.map(|v| v * c));
                }
                Op::AddScalar(a) => accumulate(&mut grads, *a, &g),
                Op::Relu(a) => {
                    let ga = g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, |g, s| g * s * (1.0 - s));
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Abs(a) => {
                    let ga = g.zip_map(val(*a), |g, x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Min(a, b) | Op::Max(a, b) => {
                    let is_min = matches!(node.op, Op::Min(..));
                    let first = val(*a).zip_map(val(*b), |x, y| {
                        let pick_a = if is_min { x <= y } else { x >= y };
                        if pick_a {
                            1.0
                        } else {
                            0.0
                        }
                    });
                    let ga = g.zip_map(&first, |g, m| g * m);
                    let gb = g.zip_map(&first, |g, m| g * (1.0 - m));
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let ga = g.zip_map(val(*a), |g, x| if x >= lo && x <= hi { g } else { 0.0 });
                    accumulate(&mut grads, *a, &ga);
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&val(*b).transpose());
                    let gb = val(*a).transpose().matmul(&g);
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, &g.transpose()),
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    accumulate(&mut grads, *a, &Tensor::filled(r, c, g.item()));
                }
                Op::RowSums(a) => {
                    let (r, c) = val(*a).shape();
                    let mut ga = Tensor::zeros(r, c);
                    for i in 0..r {
                        let gi = g.data()[i];
                        ga.data_mut()[i * c..(i + 1) * c].fill(gi);
                    }
                    accumulate(&mut grads, *a, &ga);
                }
                Op::ColSums(a) => {
                    let (r, c) = val(*a).shape();
                    let mut ga = Tensor::zeros(r, c);
                    for i in 0..r {
                        ga.data_mut()[i * c..(i + 1) * c].copy_from_slice(g.data());
                    }
                    accumulate(&mut grads, *a, &ga);
                }
                Op::ColBroadcast(a) => {
                    let c = g.cols();
                    let ga: Vec<f64> = g.data().chunks(c).map(|row| row.iter().sum()).collect();
                    accumulate(&mut grads, *a, &Tensor::new(ga.len(), 1, ga));
                }
                Op::RowBroadcast(a) => {
                    let c = g.cols();
                    let mut ga = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (s, v) in ga.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    accumulate(&mut grads, *a, &Tensor::new(c, 1, ga));
                }
                Op::Select(mask, a, b) => {
                    let mut ga = g.clone();
                    let mut gb = g.clone();
                    for (k, &m) in mask.iter().enumerate() {
                        if m {
                            gb.data_mut()[k] = 0.0;
                        } else {
                            ga.data_mut()[k] = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::MulConst(a, c) => accumulate(&mut grads, *a, &g.zip_map(c, |g, c| g * c)),
                Op::Gather(a, idx) => {
                    let (r, c) = val(*a).shape();
                    let mut ga = Tensor::zeros(r, c);
                    for (p, &k) in idx.iter().enumerate() {
                        ga.data_mut()[k] += g.data()[p];
                    }
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Reshape(a) => {
                    let (r, c) = val(*a).shape();
                    accumulate(&mut grads, *a, &Tensor::new(r, c, g.data().to_vec()));
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = val(p).len();
                        let gp = Tensor::new(n, 1, g.data()[offset..offset + n].to_vec());
                        accumulate(&mut grads, p, &gp);
                        offset += n;
                    }
                }
                Op::Slice(a, start) => {
                    let (r, c) = val(*a).shape();
                    let mut ga = Tensor::zeros(r, c);
                    ga.data_mut()[*start..*start + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Mse(a, b) => {
                    let n = val(*a).len() as f64;
                    let gs = g.item();
                    let ga = val(*a).zip_map(val(*b), |x, y| 2.0 * gs * (x - y) / n);
                    accumulate(&mut grads, *b, &ga.map(|v| -v));
                    accumulate(&mut grads, *a, &ga);
                }
                Op::L1Mean(a, b) => {
                    let n = val(*a).len() as f64;
                    let gs = g.item();
                    let ga = val(*a).zip_map(val(*b), |x, y| {
                        let d = x - y;
                        if d > 0.0 {
                            gs / n
                        } else if d < 0.0 {
                            -gs / n
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *b, &ga.map(|v| -v));
                    accumulate(&mut grads, *a, &ga);
                }
            }
            grads[i] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: &Tensor) {
    match &mut grads[idx] {
        Some(existing) => existing.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.idx].value.clone()
    }

    /// Scalar value; panics on non-scalars.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.idx].value.item()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.shape(self.idx)
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn same_tape(&self, other: &Var<'_>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(AutodiffError::CrossTape(op))
        }
    }

    fn unary(&self, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'t> {
        let out = f(&self.tape.nodes.borrow()[self.idx].value);
        self.tape.push(op, out)
    }

    fn elementwise(
        &self,
        other: &Var<'_>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(other, name)?;
        let out = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.idx].value, &nodes[other.idx].value);
            if a.shape() != b.shape() {
                return Err(AutodiffError::Shape {
                    op: name,
                    lhs: a.shape(),
                    rhs: b.shape(),
                });
            }
            a.zip_map(b, f)
        };
        Ok(self.tape.push(op, out))
    }

    pub fn add(&self, other: &Var<'_>) -> Result<Var<'t>> {
        self.elementwise(other, "add", Op::Add(self.idx, other.idx), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'_>) -> Result<Var<'t>> {
        self.elementwise(other, "sub", Op::Sub(self.idx, other.idx), |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'_>) -> Result<Var<'t>> {
        self.elementwise(other, "mul", Op::Mul(self.idx, other.idx), |a, b| a * b)
    }

    pub fn div(&self, other: &Var<'_>) -> Result<Var<'t>> {
        self.elementwise(other, "div", Op::Div(self.idx, other.idx), |a, b| a / b)
    }

    pub fn min(&self, other: &Var<'_>) -> Result<Var<'t>> {
        self.elementwise(other, "min", Op::Min(self.idx, other.idx), |a, b| {
            if a <= b {
                a
            } else {
                b
            }
        })
    }

    pub fn max(&self, other: &Var<'_>) -> Result<Var<'t>> {
        self.elementwise(other, "max", Op::Max(self.idx, other.idx), |a, b| {
            if a >= b {
                a
            } else {
                b
            }
        })
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(Op::Neg(self.idx), |t| t.map(|v| -v))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.idx, c), |t| t.map(|v| v * c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.idx), |t| t.map(|v| v + c))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.idx), |t| t.map(|v| v.max(0.0)))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.idx), |t| t.map(sigmoid))
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(Op::Abs(self.idx), |t| t.map(f64::abs))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp(self.idx, lo, hi), |t| t.map(|v| v.clamp(lo, hi)))
    }

    pub fn matmul(&self, other: &Var<'_>) -> Result<Var<'t>> {
        self.same_tape(other, "matmul")?;
        let out = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.idx].value, &nodes[other.idx].value);
            if a.cols() != b.rows() {
                return Err(AutodiffError::Shape {
                    op: "matmul",
                    lhs: a.shape(),
                    rhs: b.shape(),
                });
            }
            a.matmul(b)
        };
        Ok(self.tape.push(Op::MatMul(self.idx, other.idx), out))
    }

    pub fn transpose(&self) -> Var<'t> {
        self.unary(Op::Transpose(self.idx), Tensor::transpose)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Var<'t> {
        self.unary(Op::Sum(self.idx), |t| Tensor::scalar(t.sum()))
    }

    /// `m × n → m × 1`: sum of each row.
    pub fn row_sums(&self) -> Var<'t> {
        self.unary(Op::RowSums(self.idx), |t| {
            let c = t.cols().max(1);
            let v: Vec<f64> = if t.cols() == 0 {
                vec![0.0; t.rows()]
            } else {
                t.data().chunks(c).map(|r| r.iter().sum()).collect()
            };
            Tensor::new(v.len(), 1, v)
        })
    }

    /// `m × n → n × 1`: sum of each column.
    pub fn col_sums(&self) -> Var<'t> {
        self.unary(Op::ColSums(self.idx), |t| {
            let c = t.cols();
            let mut v = vec![0.0; c];
            if c > 0 {
                for row in t.data().chunks(c) {
                    for (s, x) in v.iter_mut().zip(row) {
                        *s += x;
                    }
                }
            }
            Tensor::new(c, 1, v)
        })
    }

    /// `m × 1 → m × n`: repeats the column vector `n` times.
    pub fn col_broadcast(&self, n: usize) -> Result<Var<'t>> {
        let (r, c) = self.shape();
        if c != 1 {
            return Err(AutodiffError::Shape {
                op: "col_broadcast",
                lhs: (r, c),
                rhs: (r, 1),
            });
        }
        Ok(self.unary(Op::ColBroadcast(self.idx), |t| {
            let mut data = Vec::with_capacity(r * n);
            for &v in t.data() {
                data.extend(std::iter::repeat_n(v, n));
            }
            Tensor::new(r, n, data)
        }))
    }

    /// `n × 1 → m × n`: every row equals the transposed vector.
    pub fn row_broadcast(&self, m: usize) -> Result<Var<'t>> {
        let (r, c) = self.shape();
        if c != 1 {
            return Err(AutodiffError::Shape {
                op: "row_broadcast",
                lhs: (r, c),
                rhs: (r, 1),
            });
        }
        Ok(self.unary(Op::RowBroadcast(self.idx), |t| {
            let mut data = Vec::with_capacity(r * m);
            for _ in 0..m {
                data.extend_from_slice(t.data());
            }
            Tensor::new(m, r, data)
        }))
    }

    /// Elementwise `mask ? self : other`; the mask is a constant.
    pub fn select(&self, mask: &[bool], other: &Var<'_>) -> Result<Var<'t>> {
        self.same_tape(other, "select")?;
        let out = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.idx].value, &nodes[other.idx].value);
            if a.shape() != b.shape() || mask.len() != a.len() {
                return Err(AutodiffError::Shape {
                    op: "select",
                    lhs: a.shape(),
                    rhs: b.shape(),
                });
            }
            let data = mask
                .iter()
                .zip(a.data().iter().zip(b.data()))
                .map(|(&m, (&x, &y))| if m { x } else { y })
                .collect();
            Tensor::new(a.rows(), a.cols(), data)
        };
        Ok(self
            .tape
            .push(Op::Select(mask.to_vec(), self.idx, other.idx), out))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&self, c: &Tensor) -> Result<Var<'t>> {
        if self.shape() != c.shape() {
            return Err(AutodiffError::Shape {
                op: "mul_const",
                lhs: self.shape(),
                rhs: c.shape(),
            });
        }
        let c = c.clone();
        let out = self.tape.nodes.borrow()[self.idx]
            .value
            .zip_map(&c, |a, b| a * b);
        Ok(self.tape.push(Op::MulConst(self.idx, c), out))
    }

    /// Picks elements by flat index into a column vector (a permutation
    /// when `idx` is one).
    pub fn gather(&self, idx: &[usize]) -> Result<Var<'t>> {
        let n = self.shape().0 * self.shape().1;
        if let Some(&bad) = idx.iter().find(|&&k| k >= n) {
            return Err(AutodiffError::Invalid {
                op: "gather",
                detail: format!("index {bad} out of bounds for length {n}"),
            });
        }
        let out = {
            let nodes = self.tape.nodes.borrow();
            let v = nodes[self.idx].value.data();
            Tensor::new(idx.len(), 1, idx.iter().map(|&k| v[k]).collect())
        };
        Ok(self.tape.push(Op::Gather(self.idx, idx.to_vec()), out))
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Var<'t>> {
        let (r, c) = self.shape();
        if r * c != rows * cols {
            return Err(AutodiffError::Shape {
                op: "reshape",
                lhs: (r, c),
                rhs: (rows, cols),
            });
        }
        Ok(self.unary(Op::Reshape(self.idx), |t| {
            Tensor::new(rows, cols, t.data().to_vec())
        }))
    }

    /// Row-major flatten into a column vector.
    pub fn flatten(&self) -> Var<'t> {
        let (r, c) = self.shape();
        self.unary(Op::Reshape(self.idx), |t| {
            Tensor::new(r * c, 1, t.data().to_vec())
        })
    }

    /// Contiguous slice `[start, start + len)` of a column vector.
    pub fn slice(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let (r, c) = self.shape();
        if c != 1 || start + len > r {
            return Err(AutodiffError::Invalid {
                op: "slice",
                detail: format!("[{start}, {}) of shape {:?}", start + len, (r, c)),
            });
        }
        Ok(self.unary(Op::Slice(self.idx, start), |t| {
            Tensor::new(len, 1, t.data()[start..start + len].to_vec())
        }))
    }

    /// Mean squared error against `target`.
    pub fn mse(&self, target: &Var<'_>) -> Result<Var<'t>> {
        self.same_tape(target, "mse")?;
        let out = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.idx].value, &nodes[target.idx].value);
            if a.shape() != b.shape() || a.is_empty() {
                return Err(AutodiffError::Shape {
                    op: "mse",
                    lhs: a.shape(),
                    rhs: b.shape(),
                });
            }
            let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
            Tensor::scalar(s / a.len() as f64)
        };
        Ok(self.tape.push(Op::Mse(self.idx, target.idx), out))
    }

    /// Mean absolute difference against `other`.
    pub fn l1_mean(&self, other: &Var<'_>) -> Result<Var<'t>> {
        self.same_tape(other, "l1")?;
        let out = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.idx].value, &nodes[other.idx].value);
            if a.shape() != b.shape() || a.is_empty() {
                return Err(AutodiffError::Shape {
                    op: "l1",
                    lhs: a.shape(),
                    rhs: b.shape(),
                });
            }
            let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
            Tensor::scalar(s / a.len() as f64)
        };
        Ok(self.tape.push(Op::L1Mean(self.idx, other.idx), out))
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
