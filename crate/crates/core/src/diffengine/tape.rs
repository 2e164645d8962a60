//! Reverse-mode differentiation over batch × feature matrices.
//!
//! The backward sweep records its own operations on the same tape, so the
//! gradients it returns are ordinary [`Var`]s that can be differentiated
//! again. Force matching needs exactly this: the loss contains `∂ₓ log p`
//! and its parameter gradient is a gradient of a gradient.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};
use thiserror::Error;

use crate::ramp::{inv_pow, RampShape};

pub type Matrix = Array2<f64>;

/// `|L(z) − L(1 − z)|` beyond which the ramp logit is clamped and treated as
/// locally constant. `logistic(±50)` differs from 0 or 1 by less than `2e−22`.
pub const LOGIT_CLAMP: f64 = 50.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("loss must be a 1×1 value, got {0}×{1}")]
    NotScalar(usize, usize),
    #[error("variable belongs to a different tape")]
    ForeignVar,
    #[error("loss does not depend on any gradient recorded by a previous backward pass")]
    NotSecondOrder,
}

/// A differentiable operation whose backward rule is supplied by the caller.
///
/// `backward` receives the upstream gradient as a taped variable and must
/// return one gradient per input (`None` where no gradient flows). Building
/// the result from taped operations keeps it differentiable.
pub trait CustomOp {
    fn name(&self) -> &str;
    fn backward<'t>(&self, tape: &'t Tape, inputs: &[Var<'t>], output: Var<'t>, grad: Var<'t>) -> Vec<Option<Var<'t>>>;
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Ln(usize),
    Logistic(usize),
    Softplus(usize),
    Sin(usize),
    Cos(usize),
    Powi(usize, i32),
    MatMul(usize, usize),
    Transpose(usize),
    SumRows(usize),
    SumCols(usize),
    SumAll(usize),
    BroadcastRows(usize),
    BroadcastCols(usize),
    BroadcastScalar(usize),
    GatherCols(usize, Rc<[usize]>),
    ScatterCols(usize, Rc<[usize]>),
    Concat(Rc<[usize]>),
    MulConst(usize, Rc<Matrix>),
    RampLogit { z: usize, p: usize, dz: u8, dp: u8, shape: RampShape },
    Custom(Rc<dyn CustomOp>, Rc<[usize]>),
}

impl Op {
    fn for_each_input(&self, mut f: impl FnMut(usize)) {
        use Op::*;
        match self {
            Leaf => {}
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => {
                f(*a);
                f(*b);
            }
            Neg(a) | Scale(a, _) | AddScalar(a) | Exp(a) | Ln(a) | Logistic(a) | Softplus(a) | Sin(a)
            | Cos(a) | Powi(a, _) | Transpose(a) | SumRows(a) | SumCols(a) | SumAll(a) | BroadcastRows(a)
            | BroadcastCols(a) | BroadcastScalar(a) | GatherCols(a, _) | ScatterCols(a, _)
            | MulConst(a, _) => f(*a),
            RampLogit { z, p, .. } => {
                f(*z);
                f(*p);
            }
            Concat(ids) | Custom(_, ids) => ids.iter().copied().for_each(f),
        }
    }
}

struct Node {
    value: Rc<Matrix>,
    op: Op,
    /// Created by (or computed from) a backward sweep.
    higher: bool,
}

/// Append-only record of operations. Nodes are created in topological order.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    in_backward: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), in_backward: Cell::new(false) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix, op: Op) -> Var<'_> {
        let mut higher = self.in_backward.get();
        {
            let nodes = self.nodes.borrow();
            op.for_each_input(|i| higher |= nodes[i].higher);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, higher });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// A new input node (parameter, data or constant).
    pub fn leaf(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.leaf(Matrix::from_elem((1, 1), v))
    }

    pub fn full(&self, rows: usize, cols: usize, v: f64) -> Var<'_> {
        self.leaf(Matrix::from_elem((rows, cols), v))
    }

    pub fn zeros(&self, rows: usize, cols: usize) -> Var<'_> {
        self.full(rows, cols, 0.0)
    }

    /// Record a custom operation with a precomputed output value.
    pub fn custom<'t>(&'t self, op: Rc<dyn CustomOp>, inputs: &[Var<'t>], value: Matrix) -> Var<'t> {
        let ids: Rc<[usize]> = inputs.iter().map(|v| v.id).collect();
        self.push(value, Op::Custom(op, ids))
    }

    /// Column-wise concatenation.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of nothing");
        let views: Vec<Rc<Matrix>> = parts.iter().map(|p| p.value()).collect();
        let rows = views[0].nrows();
        assert!(views.iter().all(|v| v.nrows() == rows), "concat row mismatch");
        let arrays: Vec<_> = views.iter().map(|v| v.view()).collect();
        let value = ndarray::concatenate(Axis(1), &arrays).expect("row counts checked");
        let ids: Rc<[usize]> = parts.iter().map(|v| v.id).collect();
        self.push(value, Op::Concat(ids))
    }

    /// `∂loss/∂w` for every `w` in `wrt`, recorded on the tape.
    pub fn grad<'t>(&'t self, loss: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>, GradError> {
        self.check(loss)?;
        let (r, c) = loss.shape();
        if (r, c) != (1, 1) {
            return Err(GradError::NotScalar(r, c));
        }
        let one = self.scalar(1.0);
        self.vjp(&[(loss, one)], wrt, None)
    }

    /// Like [`Tape::grad`], but requires the loss to be built from gradients
    /// returned by an earlier sweep; the result is then a genuine
    /// second-order quantity.
    pub fn grad_of_grad<'t>(&'t self, loss: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>, GradError> {
        self.check(loss)?;
        if !self.nodes.borrow()[loss.id].higher {
            return Err(GradError::NotSecondOrder);
        }
        self.grad(loss, wrt)
    }

    fn check(&self, v: Var<'_>) -> Result<(), GradError> {
        if std::ptr::eq(v.tape, self) {
            Ok(())
        } else {
            Err(GradError::ForeignVar)
        }
    }

    /// Vector-Jacobian product: seeds every `root` with its cotangent and
    /// returns the accumulated cotangents at `wrt`.
    ///
    /// With `cutoff = Some(k)`, nodes with id `≤ k` collect cotangents but
    /// do not propagate them further. Custom operations use this for local
    /// derivatives of a sub-expression built on top of existing nodes.
    pub fn vjp<'t>(
        &'t self,
        roots: &[(Var<'t>, Var<'t>)],
        wrt: &[Var<'t>],
        cutoff: Option<usize>,
    ) -> Result<Vec<Var<'t>>, GradError> {
        for (r, s) in roots {
            self.check(*r)?;
            self.check(*s)?;
            assert_eq!(r.shape(), s.shape(), "cotangent shape must match its root");
        }
        for w in wrt {
            self.check(*w)?;
        }
        let Some(top) = roots.iter().map(|(r, _)| r.id).max() else {
            return Ok(wrt.iter().map(|w| w.zeros_like()).collect());
        };
        let floor = cutoff.map_or(0, |c| c + 1);

        // Which nodes lie on a path from some `wrt` to the roots.
        let mut needs = vec![false; top + 1];
        for w in wrt {
            if w.id <= top {
                needs[w.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in floor..=top {
                if !needs[i] {
                    let mut any = false;
                    nodes[i].op.for_each_input(|j| any |= needs[j]);
                    needs[i] = any;
                }
            }
        }

        let mut grads: Vec<Option<Var<'t>>> = vec![None; top + 1];
        for &(r, s) in roots {
            if needs[r.id] {
                accumulate(&mut grads, r.id, s);
            }
        }
        let was = self.in_backward.replace(true);
        for i in (floor..=top).rev() {
            let Some(g) = grads[i] else { continue };
            let op = self.nodes.borrow()[i].op.clone();
            let node = Var { tape: self, id: i };
            for (input, gi) in self.backward_rule(&op, node, g, &needs) {
                accumulate(&mut grads, input, gi);
            }
        }
        self.in_backward.set(was);
        Ok(wrt.iter().map(|w| grads.get(w.id).copied().flatten().unwrap_or_else(|| w.zeros_like())).collect())
    }

    fn backward_rule<'t>(&'t self, op: &Op, out: Var<'t>, g: Var<'t>, needs: &[bool]) -> Vec<(usize, Var<'t>)> {
        let v = |id: usize| Var { tape: self, id };
        let mut res = Vec::with_capacity(2);
        let mut emit = |id: usize, f: &dyn Fn() -> Var<'t>| {
            if needs[id] {
                res.push((id, f()));
            }
        };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                emit(*a, &|| g);
                emit(*b, &|| g);
            }
            Op::Sub(a, b) => {
                emit(*a, &|| g);
                emit(*b, &|| -g);
            }
            Op::Mul(a, b) => {
                emit(*a, &|| g * v(*b));
                emit(*b, &|| g * v(*a));
            }
            Op::Div(a, b) => {
                emit(*a, &|| g / v(*b));
                emit(*b, &|| -(g * out) / v(*b));
            }
            Op::Neg(a) => emit(*a, &|| -g),
            Op::Scale(a, c) => emit(*a, &|| g * *c),
            Op::AddScalar(a) => emit(*a, &|| g),
            Op::Exp(a) => emit(*a, &|| g * out),
            Op::Ln(a) => emit(*a, &|| g / v(*a)),
            Op::Logistic(a) => emit(*a, &|| g * (out * (1.0 - out))),
            Op::Softplus(a) => emit(*a, &|| g * v(*a).logistic()),
            Op::Sin(a) => emit(*a, &|| g * v(*a).cos()),
            Op::Cos(a) => emit(*a, &|| -(g * v(*a).sin())),
            Op::Powi(a, n) => emit(*a, &|| g * (v(*a).powi(n - 1) * *n as f64)),
            Op::MatMul(a, b) => {
                emit(*a, &|| g.matmul(v(*b).t()));
                emit(*b, &|| v(*a).t().matmul(g));
            }
            Op::Transpose(a) => emit(*a, &|| g.t()),
            Op::SumRows(a) => emit(*a, &|| g.broadcast_rows(v(*a).rows())),
            Op::SumCols(a) => emit(*a, &|| g.broadcast_cols(v(*a).cols())),
            Op::SumAll(a) => emit(*a, &|| {
                let (r, c) = v(*a).shape();
                g.broadcast_scalar(r, c)
            }),
            Op::BroadcastRows(a) => emit(*a, &|| g.sum_rows()),
            Op::BroadcastCols(a) => emit(*a, &|| g.sum_cols()),
            Op::BroadcastScalar(a) => emit(*a, &|| g.sum()),
            Op::GatherCols(a, idx) => emit(*a, &|| g.scatter_cols(idx, v(*a).cols())),
            Op::ScatterCols(a, idx) => emit(*a, &|| g.gather_cols(idx)),
            Op::Concat(ids) => {
                let mut start = 0;
                for &id in ids.iter() {
                    let width = v(id).cols();
                    let idx: Vec<usize> = (start..start + width).collect();
                    emit(id, &|| g.gather_cols(&idx));
                    start += width;
                }
            }
            Op::MulConst(a, c) => emit(*a, &|| g.mul_const_rc(c.clone())),
            Op::RampLogit { z, p, dz, dp, shape } => {
                emit(*z, &|| g * v(*z).ramp_logit_raw(v(*p), *shape, dz + 1, *dp));
                emit(*p, &|| g * v(*z).ramp_logit_raw(v(*p), *shape, *dz, dp + 1));
            }
            Op::Custom(custom, ids) => {
                let inputs: Vec<Var<'t>> = ids.iter().map(|&i| v(i)).collect();
                let grads = custom.backward(self, &inputs, out, g);
                assert_eq!(grads.len(), ids.len(), "custom op {} returned wrong gradient count", custom.name());
                for (&id, gi) in ids.iter().zip(grads) {
                    if let Some(gi) = gi {
                        if needs[id] {
                            assert_eq!(gi.shape(), v(id).shape(), "custom op {} gradient shape", custom.name());
                            res.push((id, gi));
                        }
                    }
                }
            }
        }
        res
    }
}

fn accumulate<'t>(grads: &mut [Option<Var<'t>>], id: usize, g: Var<'t>) {
    grads[id] = Some(match grads[id] {
        Some(prev) => prev + g,
        None => g,
    });
}

fn map(a: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    a.mapv(f)
}

fn zip_map(a: &Matrix, b: &Matrix, what: &str, f: impl Fn(f64, f64) -> f64) -> Matrix {
    assert_eq!(a.dim(), b.dim(), "shape mismatch in {what}");
    Zip::from(a).and(b).map_collect(|&x, &y| f(x, y))
}

#[inline]
fn stable_logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn stable_softplus(x: f64) -> f64 {
    if x > 35.0 {
        x
    } else if x < -35.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Mixed partial `∂ᵐ_z ∂ⁿ_p h(z, p)` of the ramp logit
/// `h = L(z) − L(1 − z)` with `1/α = e^{−p}`, including the clamp.
pub fn ramp_logit(shape: RampShape, z: f64, p: f64, dz: u8, dp: u8) -> f64 {
    let base = dz == 0 && dp == 0;
    if !(z > 0.0 && z < 1.0) {
        return if !base {
            0.0
        } else if z <= 0.0 {
            -LOGIT_CLAMP
        } else {
            LOGIT_CLAMP
        };
    }
    let h = logit_derivative(shape, z, p, 0, 0);
    if h.abs() > LOGIT_CLAMP {
        return if base { LOGIT_CLAMP.copysign(h) } else { 0.0 };
    }
    if base {
        h
    } else {
        logit_derivative(shape, z, p, dz, dp)
    }
}

fn logit_derivative(shape: RampShape, z: f64, p: f64, dz: u8, dp: u8) -> f64 {
    let m = dz as i32;
    match shape {
        RampShape::Exponential(beta) => {
            // ∂ᵐ z^{−β} = F_m z^{−β−m}, F_m = (−β)(−β−1)⋯(−β−m+1)
            let falling: f64 = (0..m).map(|j| -beta - j as f64).product();
            let sign_p = if dp % 2 == 1 { -1.0 } else { 1.0 };
            let sign_m = if m % 2 == 1 { -1.0 } else { 1.0 };
            let q = beta + m as f64;
            sign_p * (-p).exp() * falling * (sign_m * inv_pow(1.0 - z, q) - inv_pow(z, q))
        }
        RampShape::Monomial(k) => {
            if dp > 0 {
                0.0
            } else if m == 0 {
                k * (z.ln() - (1.0 - z).ln())
            } else {
                let fact: f64 = (1..m).map(|j| j as f64).product();
                let sign = if m % 2 == 1 { 1.0 } else { -1.0 };
                k * fact * (sign * z.powi(-m) + (1.0 - z).powi(-m))
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Matrix> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().dim()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    /// Value of a 1×1 variable.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.dim(), (1, 1), "item() on a non-scalar");
        v[[0, 0]]
    }

    fn zeros_like(&self) -> Var<'t> {
        let (r, c) = self.shape();
        self.tape.zeros(r, c)
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value = map(&self.value(), f);
        self.tape.push(value, op)
    }

    /// A constant copy of this value; no gradient flows through it.
    pub fn detach(self) -> Var<'t> {
        self.tape.leaf((*self.value()).clone())
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Ln(self.id), f64::ln)
    }

    pub fn logistic(self) -> Var<'t> {
        self.unary(Op::Logistic(self.id), stable_logistic)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus(self.id), stable_softplus)
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(Op::Sin(self.id), f64::sin)
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(Op::Cos(self.id), f64::cos)
    }

    pub fn tanh(self) -> Var<'t> {
        // tanh x = 2·logistic(2x) − 1
        (self * 2.0).logistic() * 2.0 - 1.0
    }

    /// `x·logistic(x)`.
    pub fn swish(self) -> Var<'t> {
        self * self.logistic()
    }

    pub fn powi(self, n: i32) -> Var<'t> {
        if n == 0 {
            return self.tape.leaf(Matrix::ones(self.shape()));
        }
        self.unary(Op::Powi(self.id, n), |x| x.powi(n))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(a.ncols(), b.nrows(), "matmul inner dimension");
        let value = a.dot(&*b);
        self.tape.push(value, Op::MatMul(self.id, rhs.id))
    }

    pub fn t(self) -> Var<'t> {
        let value = self.value().t().to_owned();
        self.tape.push(value, Op::Transpose(self.id))
    }

    /// Sum over rows: `n×m → 1×m`.
    pub fn sum_rows(self) -> Var<'t> {
        let value = self.value().sum_axis(Axis(0)).insert_axis(Axis(0));
        self.tape.push(value, Op::SumRows(self.id))
    }

    /// Sum over columns: `n×m → n×1`.
    pub fn sum_cols(self) -> Var<'t> {
        let value = self.value().sum_axis(Axis(1)).insert_axis(Axis(1));
        self.tape.push(value, Op::SumCols(self.id))
    }

    /// Sum of all entries as a 1×1 value.
    pub fn sum(self) -> Var<'t> {
        let value = Matrix::from_elem((1, 1), self.value().sum());
        self.tape.push(value, Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum() * (1.0 / n)
    }

    /// Repeat a `1×m` row `n` times.
    pub fn broadcast_rows(self, n: usize) -> Var<'t> {
        let v = self.value();
        assert_eq!(v.nrows(), 1, "broadcast_rows expects one row");
        let value = v.broadcast((n, v.ncols())).expect("row broadcast").to_owned();
        self.tape.push(value, Op::BroadcastRows(self.id))
    }

    /// Repeat an `n×1` column `m` times.
    pub fn broadcast_cols(self, m: usize) -> Var<'t> {
        let v = self.value();
        assert_eq!(v.ncols(), 1, "broadcast_cols expects one column");
        let value = v.broadcast((v.nrows(), m)).expect("column broadcast").to_owned();
        self.tape.push(value, Op::BroadcastCols(self.id))
    }

    /// Fill an `r×c` matrix with a 1×1 value.
    pub fn broadcast_scalar(self, r: usize, c: usize) -> Var<'t> {
        let value = Matrix::from_elem((r, c), self.item());
        self.tape.push(value, Op::BroadcastScalar(self.id))
    }

    /// Columns `idx` (repeats allowed) as a new matrix.
    pub fn gather_cols(self, idx: &[usize]) -> Var<'t> {
        let v = self.value();
        let value = v.select(Axis(1), idx);
        self.tape.push(value, Op::GatherCols(self.id, idx.into()))
    }

    /// Place column `k` of `self` at column `idx[k]` of a zero `n×total`
    /// matrix; repeated targets accumulate.
    pub fn scatter_cols(self, idx: &[usize], total: usize) -> Var<'t> {
        let v = self.value();
        assert_eq!(v.ncols(), idx.len(), "scatter index count");
        let mut value = Matrix::zeros((v.nrows(), total));
        for (k, &j) in idx.iter().enumerate() {
            let mut dst = value.slice_mut(s![.., j]);
            dst += &v.slice(s![.., k]);
        }
        self.tape.push(value, Op::ScatterCols(self.id, idx.into()))
    }

    /// Element-wise product with a constant matrix.
    pub fn mul_const(self, c: Matrix) -> Var<'t> {
        self.mul_const_rc(Rc::new(c))
    }

    fn mul_const_rc(self, c: Rc<Matrix>) -> Var<'t> {
        let value = zip_map(&self.value(), &c, "mul_const", |a, b| a * b);
        self.tape.push(value, Op::MulConst(self.id, c))
    }

    /// Ramp logit `h(z) = L(z) − L(1 − z)` with `1/α = e^{−p}`, element-wise.
    /// `p` must have the same shape as `self`. Outside `(0, 1)`, or where
    /// `|h| > LOGIT_CLAMP`, the value is clamped to `±LOGIT_CLAMP` and all
    /// derivatives vanish.
    pub fn ramp_logit(self, p: Var<'t>, shape: RampShape) -> Var<'t> {
        self.ramp_logit_raw(p, shape, 0, 0)
    }

    /// `∂h/∂z` with the same clamping as [`Var::ramp_logit`].
    pub fn ramp_logit_slope(self, p: Var<'t>, shape: RampShape) -> Var<'t> {
        self.ramp_logit_raw(p, shape, 1, 0)
    }

    fn ramp_logit_raw(self, p: Var<'t>, shape: RampShape, dz: u8, dp: u8) -> Var<'t> {
        let value = zip_map(&self.value(), &p.value(), "ramp_logit", |z, q| ramp_logit(shape, z, q, dz, dp));
        self.tape.push(value, Op::RampLogit { z: self.id, p: p.id, dz, dp, shape })
    }
}

macro_rules! binary {
    ($trait:ident, $method:ident, $op:ident, $f:expr) => {
        impl<'t> $trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                assert!(std::ptr::eq(self.tape, rhs.tape), "variables from different tapes");
                let value = zip_map(&self.value(), &rhs.value(), stringify!($method), $f);
                self.tape.push(value, Op::$op(self.id, rhs.id))
            }
        }
    };
}

binary!(Add, add, Add, |a, b| a + b);
binary!(Sub, sub, Sub, |a, b| a - b);
binary!(Mul, mul, Mul, |a, b| a * b);
binary!(Div, div, Div, |a, b| a / b);

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |x| -x)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, c: f64) -> Var<'t> {
        self.add_scalar(c)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, c: f64) -> Var<'t> {
        self.add_scalar(-c)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, c: f64) -> Var<'t> {
        self.scale(c)
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, v: Var<'t>) -> Var<'t> {
        (-v).add_scalar(self)
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, v: Var<'t>) -> Var<'t> {
        v.scale(self)
    }
}
