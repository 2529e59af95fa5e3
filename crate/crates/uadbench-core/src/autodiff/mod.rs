//! Reverse-mode automatic differentiation on `f64` tensors.
//!
//! A [`Tape`] records every operation eagerly; [`Tape::grad`] walks the
//! recording backwards and emits the vector-Jacobian products *as new tape
//! nodes*. Because gradients are themselves differentiable expressions,
//! higher-order derivatives (e.g. the parameter gradient of a gradient
//! penalty) fall out of calling `grad` twice — no special casing.
//!
//! The op set is deliberately small: elementwise arithmetic, a few
//! activations, reductions, broadcasting, reshape/matmul, and the
//! unfold/fold pair from which convolutions and transposed convolutions are
//! composed. Everything is `f64` so finite-difference checks can be held to
//! tight tolerances.

mod conv;
mod optim;

pub use conv::{fold, unfold, ConvGeom};
pub use optim::Adam;

use ndarray::{ArrayD, Axis, Ix2, IxDyn};
use std::cell::{Ref, RefCell};

/// One recorded operation. Parent references are node indices, which are
/// always smaller than the node's own index, so index order is a valid
/// topological order.
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Abs(usize),
    /// Elementwise sign; derivative treated as zero everywhere.
    Sign(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Square(usize),
    Sigmoid(usize),
    LeakyRelu(usize, f64),
    /// The local slope of leaky ReLU (1 or `alpha`); derivative zero.
    LeakyMask(usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    /// Sum of all elements to a 0-d scalar.
    SumAll(usize),
    /// Sum along one axis, keeping it with length 1.
    SumAxis(usize),
    /// Max along one axis, keeping it with length 1; derivative zero (used
    /// only to stabilise softmax/logsumexp, where the max term cancels).
    MaxAxis(usize),
    BroadcastTo(usize),
    /// Adjoint of broadcasting: reduce-sum down to the node's shape.
    SumTo(usize),
    Reshape(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Unfold(usize, ConvGeom),
    Fold(usize, ConvGeom),
    /// Identity value, gradient barrier.
    Detach(usize),
}

impl Op {
    fn parents(&self) -> (Option<usize>, Option<usize>) {
        use Op::*;
        match *self {
            Leaf => (None, None),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => (Some(a), Some(b)),
            Neg(a) | Abs(a) | Sign(a) | Exp(a) | Ln(a) | Sqrt(a) | Square(a) | Sigmoid(a)
            | LeakyRelu(a, _) | LeakyMask(a) | AddScalar(a) | MulScalar(a, _) | SumAll(a)
            | SumAxis(a) | MaxAxis(a) | BroadcastTo(a) | SumTo(a) | Reshape(a)
            | Transpose(a) | Unfold(a, _) | Fold(a, _) | Detach(a) => (Some(a), None),
        }
    }

    /// Whether gradients flow through this op to its parents at all.
    fn differentiable(&self) -> bool {
        !matches!(
            self,
            Op::Leaf | Op::Sign(_) | Op::LeakyMask(_) | Op::MaxAxis(_) | Op::Detach(_)
        )
    }
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    requires_grad: bool,
}

/// Growable recording of a computation. Cheap to create; drop it to free the
/// whole graph at once.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to one tape node. `Copy`, so expressions read naturally.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// A differentiable input (parameters, or data we differentiate w.r.t.).
    pub fn leaf(&self, value: ArrayD<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input (data, targets, masks).
    pub fn constant(&self, value: ArrayD<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    fn value_ref(&self, idx: usize) -> Ref<'_, ArrayD<f64>> {
        Ref::map(self.nodes.borrow(), |n| &n[idx].value)
    }

    /// Reverse pass from scalar `y` to each of `xs`, emitting the gradients
    /// as fresh (differentiable) tape nodes. Inputs that `y` does not depend
    /// on get zero gradients of the right shape.
    pub fn grad<'t>(&'t self, y: Var<'t>, xs: &[Var<'t>]) -> Vec<Var<'t>> {
        assert!(std::ptr::eq(self, y.tape), "y lives on another tape");
        for x in xs {
            assert!(std::ptr::eq(self, x.tape), "input lives on another tape");
        }
        assert_eq!(y.value().len(), 1, "grad expects a scalar objective");

        let horizon = y.idx + 1;
        let mut adj: Vec<Option<Var<'t>>> = vec![None; horizon];
        let seed = ArrayD::from_elem(self.value_ref(y.idx).raw_dim(), 1.0);
        adj[y.idx] = Some(self.push(seed, Op::Leaf, true));

        for idx in (0..horizon).rev() {
            let Some(g) = adj[idx] else { continue };
            let op = self.nodes.borrow()[idx].op.clone();
            if !op.differentiable() {
                continue;
            }
            let (p0, p1) = op.parents();
            for (pos, parent) in [(0usize, p0), (1usize, p1)] {
                let Some(parent) = parent else { continue };
                if !self.nodes.borrow()[parent].requires_grad {
                    continue;
                }
                let contribution = self.vjp(&op, idx, parent, pos, g);
                adj[parent] = Some(match adj[parent] {
                    Some(acc) => acc + contribution,
                    None => contribution,
                });
            }
        }

        xs.iter()
            .map(|x| {
                adj[x.idx].unwrap_or_else(|| {
                    let zeros = ArrayD::zeros(self.value_ref(x.idx).raw_dim());
                    self.constant(zeros)
                })
            })
            .collect()
    }

    /// Vector-Jacobian product of `op` (the node at `node_idx`) w.r.t. the
    /// parent at position `pos`, given upstream gradient `g`. Built out of
    /// ordinary tape ops so it is itself differentiable.
    fn vjp<'t>(&'t self, op: &Op, node_idx: usize, parent: usize, pos: usize, g: Var<'t>) -> Var<'t> {
        let var = |idx| Var { tape: self, idx };
        let out = var(node_idx);
        let pshape = self.value_ref(parent).shape().to_vec();
        use Op::*;
        match *op {
            Leaf => unreachable!("leaves have no parents"),
            Add(_, _) => g,
            Sub(_, _) => {
                if pos == 0 {
                    g
                } else {
                    -g
                }
            }
            Mul(a, b) => {
                if pos == 0 {
                    g * var(b)
                } else {
                    g * var(a)
                }
            }
            Div(a, b) => {
                if pos == 0 {
                    g / var(b)
                } else {
                    -(g * var(a) / var(b).square())
                }
            }
            Neg(_) => -g,
            Abs(a) => g * var(a).sign(),
            Exp(_) => g * out,
            Ln(a) => g / var(a),
            Sqrt(_) => (g / out).mul_scalar(0.5),
            Square(a) => (g * var(a)).mul_scalar(2.0),
            Sigmoid(_) => g * out * (-out).add_scalar(1.0),
            LeakyRelu(a, alpha) => g * var(a).leaky_mask(alpha),
            AddScalar(_) => g,
            MulScalar(_, c) => g.mul_scalar(c),
            SumAll(_) | SumAxis(_) | SumTo(_) => g.broadcast_to(&pshape),
            BroadcastTo(_) => g.sum_to(&pshape),
            Reshape(_) => g.reshape(&pshape),
            MatMul(a, b) => {
                if pos == 0 {
                    g.matmul(var(b).transpose())
                } else {
                    var(a).transpose().matmul(g)
                }
            }
            Transpose(_) => g.transpose(),
            Unfold(_, geom) => g.fold(geom),
            Fold(_, geom) => g.unfold(geom),
            Sign(_) | LeakyMask(_) | MaxAxis(_) | Detach(_) => {
                unreachable!("non-differentiable ops are filtered before vjp")
            }
        }
    }
}

impl<'t> Var<'t> {
    /// The tape this variable lives on.
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> ArrayD<f64> {
        self.tape.value_ref(self.idx).clone()
    }

    /// Read the value without cloning.
    pub fn with_value<R>(&self, f: impl FnOnce(&ArrayD<f64>) -> R) -> R {
        f(&self.tape.value_ref(self.idx))
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_ref(self.idx).shape().to_vec()
    }

    /// Extract a 0-d (or single-element) value.
    pub fn scalar(&self) -> f64 {
        let v = self.tape.value_ref(self.idx);
        assert_eq!(v.len(), 1, "scalar() on non-scalar of shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.idx].requires_grad
    }

    fn unary(self, value: ArrayD<f64>, op: Op) -> Var<'t> {
        let rg = self.requires_grad() && op.differentiable();
        self.tape.push(value, op, rg)
    }

    fn binary(self, rhs: Var<'t>, value: ArrayD<f64>, op: Op) -> Var<'t> {
        assert!(std::ptr::eq(self.tape, rhs.tape), "vars from different tapes");
        let rg = (self.requires_grad() || rhs.requires_grad()) && op.differentiable();
        self.tape.push(value, op, rg)
    }

    pub fn abs(self) -> Var<'t> {
        let v = self.tape.value_ref(self.idx).mapv(f64::abs);
        self.unary(v, Op::Abs(self.idx))
    }

    pub fn sign(self) -> Var<'t> {
        let v = self
            .tape
            .value_ref(self.idx)
            .mapv(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 });
        self.unary(v, Op::Sign(self.idx))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.tape.value_ref(self.idx).mapv(f64::exp);
        self.unary(v, Op::Exp(self.idx))
    }

    pub fn ln(self) -> Var<'t> {
        let v = self.tape.value_ref(self.idx).mapv(f64::ln);
        self.unary(v, Op::Ln(self.idx))
    }

    pub fn sqrt(self) -> Var<'t> {
        let v = self.tape.value_ref(self.idx).mapv(f64::sqrt);
        self.unary(v, Op::Sqrt(self.idx))
    }

    pub fn square(self) -> Var<'t> {
        let v = self.tape.value_ref(self.idx).mapv(|x| x * x);
        self.unary(v, Op::Square(self.idx))
    }

    pub fn sigmoid(self) -> Var<'t> {
        // Stable in both tails.
        let v = self.tape.value_ref(self.idx).mapv(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.unary(v, Op::Sigmoid(self.idx))
    }

    pub fn leaky_relu(self, alpha: f64) -> Var<'t> {
        let v = self
            .tape
            .value_ref(self.idx)
            .mapv(|x| if x > 0.0 { x } else { alpha * x });
        self.unary(v, Op::LeakyRelu(self.idx, alpha))
    }

    /// Local slope of [`Var::leaky_relu`]; non-differentiable.
    pub fn leaky_mask(self, alpha: f64) -> Var<'t> {
        let v = self
            .tape
            .value_ref(self.idx)
            .mapv(|x| if x > 0.0 { 1.0 } else { alpha });
        self.unary(v, Op::LeakyMask(self.idx))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let v = self.tape.value_ref(self.idx).mapv(|x| x + c);
        self.unary(v, Op::AddScalar(self.idx))
    }

    pub fn mul_scalar(self, c: f64) -> Var<'t> {
        let v = self.tape.value_ref(self.idx).mapv(|x| x * c);
        self.unary(v, Op::MulScalar(self.idx, c))
    }

    pub fn sum_all(self) -> Var<'t> {
        let s = self.tape.value_ref(self.idx).sum();
        self.unary(ArrayD::from_elem(IxDyn(&[]), s), Op::SumAll(self.idx))
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.tape.value_ref(self.idx).len();
        assert!(n > 0, "mean of empty tensor");
        self.sum_all().mul_scalar(1.0 / n as f64)
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis(self, axis: usize) -> Var<'t> {
        let v = self
            .tape
            .value_ref(self.idx)
            .sum_axis(Axis(axis))
            .insert_axis(Axis(axis));
        self.unary(v, Op::SumAxis(self.idx))
    }

    /// Max along `axis`, keeping it with length 1. Gradient barrier.
    pub fn max_axis(self, axis: usize) -> Var<'t> {
        let v = self
            .tape
            .value_ref(self.idx)
            .fold_axis(Axis(axis), f64::NEG_INFINITY, |m, &x| m.max(x))
            .insert_axis(Axis(axis));
        self.unary(v, Op::MaxAxis(self.idx))
    }

    /// Numpy-style broadcast (right-aligned) to `shape`.
    pub fn broadcast_to(self, shape: &[usize]) -> Var<'t> {
        let v = self
            .tape
            .value_ref(self.idx)
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| {
                panic!(
                    "cannot broadcast {:?} to {:?}",
                    self.tape.value_ref(self.idx).shape(),
                    shape
                )
            })
            .to_owned();
        self.unary(v, Op::BroadcastTo(self.idx))
    }

    /// Reduce-sum down to `shape` (the adjoint of broadcasting to us).
    pub fn sum_to(self, shape: &[usize]) -> Var<'t> {
        let v = sum_to_shape(&self.tape.value_ref(self.idx), shape);
        self.unary(v, Op::SumTo(self.idx))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let v = self
            .tape
            .value_ref(self.idx)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape must preserve element count");
        self.unary(v, Op::Reshape(self.idx))
    }

    /// 2-d matrix product.
    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let v = {
            let a = self.tape.value_ref(self.idx);
            let b = rhs.tape.value_ref(rhs.idx);
            let a2 = a.view().into_dimensionality::<Ix2>().expect("lhs must be 2-d");
            let b2 = b.view().into_dimensionality::<Ix2>().expect("rhs must be 2-d");
            a2.dot(&b2).into_dyn()
        };
        self.binary(rhs, v, Op::MatMul(self.idx, rhs.idx))
    }

    /// 2-d transpose.
    pub fn transpose(self) -> Var<'t> {
        let v = {
            let a = self.tape.value_ref(self.idx);
            assert_eq!(a.ndim(), 2, "transpose expects 2-d");
            // `as_standard_layout` keeps the stored value C-ordered; a bare
            // `to_owned` of the transposed view would stay f-ordered and
            // break later reshapes.
            a.t().as_standard_layout().into_owned()
        };
        self.unary(v, Op::Transpose(self.idx))
    }

    /// Lower `[n, h, w, c]` to convolution patch columns.
    pub fn unfold(self, geom: ConvGeom) -> Var<'t> {
        let v = conv::unfold(&self.tape.value_ref(self.idx), &geom);
        self.unary(v, Op::Unfold(self.idx, geom))
    }

    /// Scatter-add patch columns back to `[n, h, w, c]`.
    pub fn fold(self, geom: ConvGeom) -> Var<'t> {
        let v = conv::fold(&self.tape.value_ref(self.idx), &geom);
        self.unary(v, Op::Fold(self.idx, geom))
    }

    /// Same value, but gradients stop here.
    pub fn detach(self) -> Var<'t> {
        let v = self.tape.value_ref(self.idx).clone();
        self.unary(v, Op::Detach(self.idx))
    }

    /// Numerically stable `ln(sum(exp(x)))` along `axis` (kept, length 1).
    pub fn logsumexp(self, axis: usize) -> Var<'t> {
        let m = self.max_axis(axis);
        let shape = self.shape();
        let shifted = self - m.broadcast_to(&shape);
        shifted.exp().sum_axis(axis).ln() + m
    }

    /// Softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Var<'t> {
        let shape = self.shape();
        let lse = self.logsumexp(axis);
        (self - lse.broadcast_to(&shape)).exp()
    }
}

fn sum_to_shape(x: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    assert!(
        x.ndim() >= shape.len(),
        "sum_to target {:?} has more axes than source {:?}",
        shape,
        x.shape()
    );
    let mut cur = x.to_owned();
    while cur.ndim() > shape.len() {
        cur = cur.sum_axis(Axis(0));
    }
    for (ax, (&have, &want)) in cur.shape().to_vec().iter().zip(shape).enumerate() {
        if have == want {
            continue;
        }
        assert_eq!(want, 1, "sum_to {:?} incompatible with {:?}", shape, x.shape());
        cur = cur.sum_axis(Axis(ax)).insert_axis(Axis(ax));
    }
    cur
}

macro_rules! impl_binop {
    ($trait:ident, $method:ident, $op:ident, $f:expr) => {
        impl<'t> std::ops::$trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                let v = {
                    let a = self.tape.value_ref(self.idx);
                    let b = rhs.tape.value_ref(rhs.idx);
                    assert_eq!(
                        a.shape(),
                        b.shape(),
                        concat!(stringify!($method), " expects equal shapes; broadcast explicitly")
                    );
                    #[allow(clippy::redundant_closure_call)]
                    ($f)(&*a, &*b)
                };
                self.binary(rhs, v, Op::$op(self.idx, rhs.idx))
            }
        }
    };
}

impl_binop!(Add, add, Add, |a: &ArrayD<f64>, b: &ArrayD<f64>| a + b);
impl_binop!(Sub, sub, Sub, |a: &ArrayD<f64>, b: &ArrayD<f64>| a - b);
impl_binop!(Mul, mul, Mul, |a: &ArrayD<f64>, b: &ArrayD<f64>| a * b);
impl_binop!(Div, div, Div, |a: &ArrayD<f64>, b: &ArrayD<f64>| a / b);

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        let v = self.tape.value_ref(self.idx).mapv(|x| -x);
        self.unary(v, Op::Neg(self.idx))
    }
}
