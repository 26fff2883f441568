//! Matrix-valued reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar output walks the record in reverse and
//! accumulates vector-Jacobian products into every leaf created with
//! [`Tape::leaf`]. Values created with [`Tape::constant`] never receive
//! gradients, which is how stop-gradient targets are expressed.
//!
//! Binary elementwise operations broadcast a `1×m`, `n×1` or `1×1`
//! operand against an `n×m` one.

use std::cell::RefCell;
use std::rc::Rc;

use super::linalg::Lu;
use super::Matrix;
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op {
    Input,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Exp(usize),
    Ln { x: usize, floor: f64 },
    Powf(usize, f64),
    Sqrt(usize),
    Relu(usize),
    ClampMin(usize, f64),
    Scale(usize, f64),
    AddScalar(usize),
    SumRows(usize),
    SumCols(usize),
    SumAll(usize),
    LogSoftmaxRows(usize),
    LogSumExpRows(usize),
    NormalizeRows { x: usize, floor: f64 },
    GatherRows(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
    Pick(usize, Vec<usize>),
    Solve { a: usize, b: usize, lu: Lu },
}

#[derive(Debug)]
struct Node {
    value: Rc<Matrix>,
    op: Op,
    needs_grad: bool,
}

/// Operation record for one differentiable computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Accumulated gradients, indexed by the [`Var`] they belong to.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when it did not influence the output.
    pub fn get(&self, var: Var<'_>) -> Matrix {
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.id];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

#[inline]
fn bget(m: &Matrix, i: usize, j: usize) -> f64 {
    let (r, c) = m.shape();
    m[(if r == 1 { 0 } else { i }, if c == 1 { 0 } else { j })]
}

fn broadcast_zip(a: &Matrix, b: &Matrix, shape: (usize, usize), f: impl Fn(f64, f64) -> f64) -> Matrix {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    Matrix::from_fn(shape.0, shape.1, |i, j| f(bget(a, i, j), bget(b, i, j)))
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(g: Matrix, shape: (usize, usize)) -> Matrix {
    if g.shape() == shape {
        return g;
    }
    let mut out = Matrix::zeros(shape.0, shape.1);
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let oi = if shape.0 == 1 { 0 } else { i };
            let oj = if shape.1 == 1 { 0 } else { j };
            out[(oi, oj)] += g[(i, j)];
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Matrix, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Input, true)
    }

    /// A value that is treated as constant during backpropagation.
    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Input, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value_rc(&self, id: usize) -> Rc<Matrix> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Backpropagates from `output`, whose every entry is seeded with 1.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Matrix>> = (0..nodes.len()).map(|_| None).collect();
        let shapes = nodes.iter().map(|n| n.value.shape()).collect();
        let (r, c) = nodes[output.id].value.shape();
        grads[output.id] = Some(Matrix::filled(r, c, 1.0));

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Input) {
                grads[id] = Some(g);
                continue;
            }
            let out = &node.value;
            let val = |k: usize| &nodes[k].value;
            let mut send = |k: usize, contrib: Matrix| {
                if !nodes[k].needs_grad {
                    return;
                }
                match &mut grads[k] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Input => unreachable!(),
                Op::Add(a, b) => {
                    send(*a, reduce_to(g.clone(), val(*a).shape()));
                    send(*b, reduce_to(g, val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    send(*a, reduce_to(g.clone(), val(*a).shape()));
                    send(*b, reduce_to(g.scale(-1.0), val(*b).shape()));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if nodes[*a].needs_grad {
                        let ga = broadcast_zip(&g, vb, g.shape(), |g, y| g * y);
                        send(*a, reduce_to(ga, va.shape()));
                    }
                    if nodes[*b].needs_grad {
                        let gb = broadcast_zip(&g, va, g.shape(), |g, x| g * x);
                        send(*b, reduce_to(gb, vb.shape()));
                    }
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if nodes[*a].needs_grad {
                        let ga = broadcast_zip(&g, vb, g.shape(), |g, y| g / y);
                        send(*a, reduce_to(ga, va.shape()));
                    }
                    if nodes[*b].needs_grad {
                        // d(x/y)/dy = -out / y
                        let q = broadcast_zip(out, vb, g.shape(), |o, y| -o / y);
                        send(*b, reduce_to(g.zip_map(&q, |g, q| g * q), vb.shape()));
                    }
                }
                Op::MatMul(a, b) => {
                    if nodes[*a].needs_grad {
                        send(*a, g.matmul_t(val(*b)));
                    }
                    if nodes[*b].needs_grad {
                        send(*b, val(*a).t_matmul(&g));
                    }
                }
                Op::Transpose(a) => send(*a, g.transpose()),
                Op::Exp(a) => send(*a, g.zip_map(out, |g, o| g * o)),
                Op::Ln { x, floor } => {
                    send(*x, g.zip_map(val(*x), |g, v| if v > *floor { g / v } else { 0.0 }));
                }
                Op::Powf(a, p) => {
                    send(*a, g.zip_map(val(*a), |g, v| g * p * v.powf(p - 1.0)));
                }
                Op::Sqrt(a) => send(*a, g.zip_map(out, |g, o| g / (2.0 * o))),
                Op::Relu(a) => send(*a, g.zip_map(val(*a), |g, v| if v > 0.0 { g } else { 0.0 })),
                Op::ClampMin(a, lo) => {
                    send(*a, g.zip_map(val(*a), |g, v| if v > *lo { g } else { 0.0 }));
                }
                Op::Scale(a, s) => send(*a, g.scale(*s)),
                Op::AddScalar(a) => send(*a, g),
                Op::SumRows(a) => {
                    let (n, m) = val(*a).shape();
                    send(*a, Matrix::from_fn(n, m, |i, _| g[(i, 0)]));
                }
                Op::SumCols(a) => {
                    let (n, m) = val(*a).shape();
                    send(*a, Matrix::from_fn(n, m, |_, j| g[(0, j)]));
                }
                Op::SumAll(a) => {
                    let (n, m) = val(*a).shape();
                    send(*a, Matrix::filled(n, m, g[(0, 0)]));
                }
                Op::LogSoftmaxRows(a) => {
                    let (n, m) = out.shape();
                    let mut ga = Matrix::zeros(n, m);
                    for i in 0..n {
                        let gs: f64 = g.row(i).iter().sum();
                        for j in 0..m {
                            ga[(i, j)] = g[(i, j)] - out[(i, j)].exp() * gs;
                        }
                    }
                    send(*a, ga);
                }
                Op::LogSumExpRows(a) => {
                    let x = val(*a);
                    let ga = Matrix::from_fn(x.rows(), x.cols(), |i, j| {
                        g[(i, 0)] * (x[(i, j)] - out[(i, 0)]).exp()
                    });
                    send(*a, ga);
                }
                Op::NormalizeRows { x, floor } => {
                    let xv = val(*x);
                    let (n, m) = xv.shape();
                    let mut ga = Matrix::zeros(n, m);
                    for i in 0..n {
                        let norm = xv.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm > *floor {
                            let dot: f64 = out.row(i).iter().zip(g.row(i)).map(|(y, g)| y * g).sum();
                            for j in 0..m {
                                ga[(i, j)] = (g[(i, j)] - out[(i, j)] * dot) / norm;
                            }
                        } else {
                            for j in 0..m {
                                ga[(i, j)] = g[(i, j)] / floor;
                            }
                        }
                    }
                    send(*x, ga);
                }
                Op::GatherRows(a, idx) => {
                    let (n, m) = val(*a).shape();
                    let mut ga = Matrix::zeros(n, m);
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..m {
                            ga[(src, j)] += g[(r, j)];
                        }
                    }
                    send(*a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = val(p).rows();
                        let idx: Vec<usize> = (start..start + rows).collect();
                        send(p, g.select_rows(&idx));
                        start += rows;
                    }
                }
                Op::Pick(a, idx) => {
                    let (n, m) = val(*a).shape();
                    let mut ga = Matrix::zeros(n, m);
                    for (i, &j) in idx.iter().enumerate() {
                        ga[(i, j)] = g[(i, 0)];
                    }
                    send(*a, ga);
                }
                Op::Solve { a, b, lu } => {
                    // X = A⁻¹B: dB = A⁻ᵀ G, dA = -dB Xᵀ
                    let gb = lu
                        .solve_transposed(&g)
                        .expect("solve shapes were validated in the forward pass");
                    if nodes[*a].needs_grad {
                        send(*a, gb.matmul_t(out).scale(-1.0));
                    }
                    send(*b, gb);
                }
            }
        }
        Gradients { grads, shapes }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// The recorded value.
    pub fn value(&self) -> Rc<Matrix> {
        self.tape.value_rc(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    /// Scalar value of a `1×1` variable.
    pub fn scalar(&self) -> f64 {
        let v = self.value();
        debug_assert_eq!(v.shape(), (1, 1));
        v[(0, 0)]
    }

    /// Same value with gradients cut.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    fn unary(&self, value: Matrix, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.tape.needs(self.id))
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
            Error::shape(name, format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()))
        })?;
        let value = broadcast_zip(&a, &b, shape, f);
        let needs = self.tape.needs(self.id) || self.tape.needs(other.id);
        Ok(self.tape.push(value, op, needs))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    /// Adds a constant matrix (broadcast like [`Var::add`]).
    pub fn add_const(&self, c: Matrix) -> Result<Var<'t>> {
        self.add(self.tape.constant(c))
    }

    /// Multiplies by a constant matrix (broadcast like [`Var::mul`]).
    pub fn mul_const(&self, c: Matrix) -> Result<Var<'t>> {
        self.mul(self.tape.constant(c))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let value = a.matmul(&b)?;
        let needs = self.tape.needs(self.id) || self.tape.needs(other.id);
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), needs))
    }

    pub fn transpose(&self) -> Var<'t> {
        self.unary(self.value().transpose(), Op::Transpose(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(self.value().map(f64::exp), Op::Exp(self.id))
    }

    pub fn ln(&self) -> Var<'t> {
        self.ln_floor(0.0)
    }

    /// `ln(max(x, floor))`; entries at or below the floor get zero gradient.
    pub fn ln_floor(&self, floor: f64) -> Var<'t> {
        let v = self.value().map(|x| x.max(floor).ln());
        self.unary(v, Op::Ln { x: self.id, floor })
    }

    pub fn powf(&self, p: f64) -> Var<'t> {
        self.unary(self.value().map(|x| x.powf(p)), Op::Powf(self.id, p))
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(self.value().map(f64::sqrt), Op::Sqrt(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(self.value().map(|x| x.max(0.0)), Op::Relu(self.id))
    }

    pub fn clamp_min(&self, lo: f64) -> Var<'t> {
        self.unary(self.value().map(|x| x.max(lo)), Op::ClampMin(self.id, lo))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.unary(self.value().scale(s), Op::Scale(self.id, s))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        self.unary(self.value().map(|x| x + s), Op::AddScalar(self.id))
    }

    /// `n×m → n×1`.
    pub fn sum_rows(&self) -> Var<'t> {
        let v = self.value();
        self.unary(Matrix::column_vector(&v.row_sums()), Op::SumRows(self.id))
    }

    /// `n×m → 1×m`.
    pub fn sum_cols(&self) -> Var<'t> {
        let v = self.value();
        self.unary(Matrix::row_vector(&v.col_sums()), Op::SumCols(self.id))
    }

    /// Sum of all entries as `1×1`.
    pub fn sum(&self) -> Var<'t> {
        let s = self.value().sum();
        self.unary(Matrix::scalar(s), Op::SumAll(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().len().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    pub fn log_softmax_rows(&self) -> Var<'t> {
        let v = self.value();
        let mut out = Matrix::zeros(v.rows(), v.cols());
        for i in 0..v.rows() {
            out.row_mut(i).copy_from_slice(&super::log_softmax_unchecked(v.row(i)));
        }
        self.unary(out, Op::LogSoftmaxRows(self.id))
    }

    pub fn softmax_rows(&self) -> Var<'t> {
        self.log_softmax_rows().exp()
    }

    /// Row-wise log-sum-exp, `n×m → n×1`.
    pub fn logsumexp_rows(&self) -> Var<'t> {
        let v = self.value();
        let lse: Vec<f64> = v.row_iter().map(super::logsumexp).collect();
        self.unary(Matrix::column_vector(&lse), Op::LogSumExpRows(self.id))
    }

    /// Divides each row by `max(‖row‖₂, floor)`.
    pub fn normalize_rows(&self, floor: f64) -> Var<'t> {
        let v = self.value();
        let mut out = (*v).clone();
        for i in 0..v.rows() {
            let norm = v.row(i).iter().map(|x| x * x).sum::<f64>().sqrt().max(floor);
            out.row_mut(i).iter_mut().for_each(|x| *x /= norm);
        }
        self.unary(out, Op::NormalizeRows { x: self.id, floor })
    }

    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if let Some(&bad) = indices.iter().find(|&&i| i >= v.rows()) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {}", v.rows())));
        }
        Ok(self.unary(v.select_rows(indices), Op::GatherRows(self.id, indices.to_vec())))
    }

    /// Picks `x[i, idx[i]]` from each row, `n×m → n×1`.
    pub fn pick(&self, indices: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if indices.len() != v.rows() || indices.iter().any(|&j| j >= v.cols()) {
            return Err(Error::shape(
                "pick",
                format!("{} indices into {:?}", indices.len(), v.shape()),
            ));
        }
        let picked: Vec<f64> = indices.iter().enumerate().map(|(i, &j)| v[(i, j)]).collect();
        Ok(self.unary(Matrix::column_vector(&picked), Op::Pick(self.id, indices.to_vec())))
    }

    /// `A⁻¹ B` with `self = A` (square).
    pub fn solve(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let lu = Lu::factor(&a)?;
        let cond = lu.condition_estimate();
        if !cond.is_finite() || cond > super::linalg::MAX_CONDITION {
            return Err(Error::IllConditioned(cond));
        }
        let x = lu.solve(&rhs.value())?;
        let needs = self.tape.needs(self.id) || self.tape.needs(rhs.id);
        Ok(self.tape.push(x, Op::Solve { a: self.id, b: rhs.id, lu }, needs))
    }
}

/// Stacks variables vertically.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let tape = parts
        .first()
        .ok_or_else(|| Error::invalid("concat_rows of nothing"))?
        .tape;
    let values: Vec<Rc<Matrix>> = parts.iter().map(|p| p.value()).collect();
    let refs: Vec<&Matrix> = values.iter().map(|v| v.as_ref()).collect();
    let value = Matrix::vstack(&refs)?;
    let needs = parts.iter().any(|p| tape.needs(p.id));
    Ok(tape.push(value, Op::ConcatRows(parts.iter().map(|p| p.id).collect()), needs))
}
