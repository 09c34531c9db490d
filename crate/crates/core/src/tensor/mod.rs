//! Reverse-mode autodiff over dense row-major tensors.
//!
//! A [`Tape`] records every operation in execution order; [`Tape::backward`]
//! walks the record in reverse and accumulates gradients into each node.
//! Training runs at `f32`; gradient checking and the numeric oracles run the
//! exact same code at `f64`.
//!
//! Every forward result is scanned for NaN/Inf and rejected immediately, so a
//! numerical blow-up surfaces at the op that produced it rather than as a
//! corrupted loss many steps later.

mod kernels;
mod norm;
mod sample;
pub mod gradcheck;
pub(crate) mod shape;

pub use kernels::Conv2dOpts;
pub use norm::{NormMode, NORM_EPS};

use shape::{broadcast_shapes, numel, PairWalker};

/// Element type of the engine. `f32` for training, `f64` for oracles.
pub trait Scalar:
    num_traits::Float + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch { op, detail: detail.into() }
}

pub(crate) fn arg_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument { op, detail: detail.into() }
}

/// A dense row-major value. `grad` is populated by [`Tape::backward`] for
/// nodes that require (or feed) gradients.
#[derive(Debug, Clone)]
pub struct Tensor<S: Scalar> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
    pub requires_grad: bool,
    pub grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self, TensorError> {
        if numel(&shape) != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {:?} wants {} elements, got {}", shape, numel(&shape), data.len()),
            ));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); numel(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; numel(shape)], requires_grad: false, grad: None }
    }

    pub fn scalar(v: S) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false, grad: None }
    }

    pub fn from_f64s(shape: &[usize], data: &[f64]) -> Result<Self, TensorError> {
        Tensor::new(shape.to_vec(), data.iter().map(|&v| S::from_f64(v)).collect())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::from_f64(v.into_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryFn {
    Relu,
    Gelu,
    Sigmoid,
    Tanh,
    Abs,
    Sqrt,
    Log10,
    Neg,
    /// arccos of the input clamped to [-1, 1]; the gradient is zero at and
    /// beyond the clamp boundary so exact hits do not produce NaN.
    AcosClamped,
}

impl UnaryFn {
    fn name(self) -> &'static str {
        match self {
            UnaryFn::Relu => "relu",
            UnaryFn::Gelu => "gelu",
            UnaryFn::Sigmoid => "sigmoid",
            UnaryFn::Tanh => "tanh",
            UnaryFn::Abs => "abs",
            UnaryFn::Sqrt => "sqrt",
            UnaryFn::Log10 => "log10",
            UnaryFn::Neg => "neg",
            UnaryFn::AcosClamped => "acos_clamped",
        }
    }

    fn eval<S: Scalar>(self, x: S) -> S {
        match self {
            UnaryFn::Relu => {
                if x > S::zero() {
                    x
                } else {
                    S::zero()
                }
            }
            UnaryFn::Gelu => {
                // tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
                let a = S::from_f64(0.7978845608028654);
                let c = S::from_f64(0.044715);
                let half = S::from_f64(0.5);
                let u = a * (x + c * x * x * x);
                half * x * (S::one() + u.tanh())
            }
            UnaryFn::Sigmoid => {
                if x >= S::zero() {
                    S::one() / (S::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (S::one() + e)
                }
            }
            UnaryFn::Tanh => x.tanh(),
            UnaryFn::Abs => x.abs(),
            UnaryFn::Sqrt => x.sqrt(),
            UnaryFn::Log10 => x.log10(),
            UnaryFn::Neg => -x,
            UnaryFn::AcosClamped => {
                let one = S::one();
                let v = if x > one {
                    one
                } else if x < -one {
                    -one
                } else {
                    x
                };
                v.acos()
            }
        }
    }

    /// d f / d x given the input `x` and the already-computed output `y`.
    /// Subgradient conventions: relu'(0) = 0, abs'(0) = 0.
    fn deriv<S: Scalar>(self, x: S, y: S) -> S {
        match self {
            UnaryFn::Relu => {
                if x > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            UnaryFn::Gelu => {
                let a = S::from_f64(0.7978845608028654);
                let c = S::from_f64(0.044715);
                let half = S::from_f64(0.5);
                let three = S::from_f64(3.0);
                let u = a * (x + c * x * x * x);
                let t = u.tanh();
                let sech2 = S::one() - t * t;
                half * (S::one() + t) + half * x * sech2 * a * (S::one() + three * c * x * x)
            }
            UnaryFn::Sigmoid => y * (S::one() - y),
            UnaryFn::Tanh => S::one() - y * y,
            UnaryFn::Abs => {
                if x > S::zero() {
                    S::one()
                } else if x < S::zero() {
                    -S::one()
                } else {
                    S::zero()
                }
            }
            UnaryFn::Sqrt => S::from_f64(0.5) / y,
            UnaryFn::Log10 => S::from_f64(std::f64::consts::LOG10_E) / x,
            UnaryFn::Neg => -S::one(),
            UnaryFn::AcosClamped => {
                if x.abs() >= S::one() {
                    S::zero()
                } else {
                    -S::one() / (S::one() - x * x).sqrt()
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryFn {
    Add,
    Sub,
    Mul,
    Div,
    /// atan2(a, b): a is the y argument, b the x argument.
    Atan2,
}

impl BinaryFn {
    fn name(self) -> &'static str {
        match self {
            BinaryFn::Add => "add",
            BinaryFn::Sub => "sub",
            BinaryFn::Mul => "mul",
            BinaryFn::Div => "div",
            BinaryFn::Atan2 => "atan2",
        }
    }

    #[inline]
    fn eval<S: Scalar>(self, a: S, b: S) -> S {
        match self {
            BinaryFn::Add => a + b,
            BinaryFn::Sub => a - b,
            BinaryFn::Mul => a * b,
            BinaryFn::Div => a / b,
            BinaryFn::Atan2 => a.atan2(b),
        }
    }

    /// (df/da, df/db).
    #[inline]
    fn deriv<S: Scalar>(self, a: S, b: S) -> (S, S) {
        match self {
            BinaryFn::Add => (S::one(), S::one()),
            BinaryFn::Sub => (S::one(), -S::one()),
            BinaryFn::Mul => (b, a),
            BinaryFn::Div => (S::one() / b, -a / (b * b)),
            BinaryFn::Atan2 => {
                let d = a * a + b * b;
                (b / d, -a / d)
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary { x: TensorId, f: UnaryFn },
    Binary { a: TensorId, b: TensorId, f: BinaryFn },
    Clamp { x: TensorId, lo: f64, hi: f64 },
    AddScalar { x: TensorId },
    MulScalar { x: TensorId, c: f64 },
    Linear { x: TensorId, w: TensorId, b: TensorId },
    Conv2d { x: TensorId, w: TensorId, b: TensorId, opts: Conv2dOpts },
    MaxPool2 { x: TensorId, argmax: Vec<u32> },
    BilinearResize { x: TensorId, wrap_w: bool },
    SampleBilinear { feat: TensorId, coords: TensorId },
    Softmax { x: TensorId, axis: usize },
    SumAll { x: TensorId },
    SumAxis { x: TensorId, axis: usize },
    MeanAxes { x: TensorId, axes: Vec<usize> },
    Reshape { x: TensorId },
    Concat { xs: Vec<TensorId>, axis: usize },
    Narrow { x: TensorId, axis: usize, start: usize, len: usize },
    VecNorm { x: TensorId, axis: usize },
    /// Forward sigmoid with a deliberately miscalibrated backward rule.
    /// Exists only so the gradient checker's failure path stays exercised.
    SigmoidBadGrad { x: TensorId },
}

struct Node<S: Scalar> {
    t: Tensor<S>,
    op: Op,
    needs_grad: bool,
}

/// Operation record. Nodes are pushed in execution order, which is already a
/// topological order, so the backward pass is a single reverse sweep.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a value as a graph leaf. Gradients accumulate into it only when
    /// `t.requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<S>) -> Result<TensorId, TensorError> {
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        let needs = t.requires_grad;
        self.nodes.push(Node { t, op: Op::Leaf, needs_grad: needs });
        Ok(TensorId(self.nodes.len() - 1))
    }

    /// Insert a value that never receives gradients (masks, grids, kernels).
    pub fn constant(&mut self, mut t: Tensor<S>) -> Result<TensorId, TensorError> {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<S> {
        &self.nodes[id.0].t
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].t.shape
    }

    pub fn data(&self, id: TensorId) -> &[S] {
        &self.nodes[id.0].t.data
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, id: TensorId) -> S {
        debug_assert_eq!(self.nodes[id.0].t.numel(), 1);
        self.nodes[id.0].t.data[0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.nodes[id.0].t.grad.as_deref()
    }

    /// Clone a node's value out of the tape.
    pub fn detach(&self, id: TensorId) -> Tensor<S> {
        let mut t = self.nodes[id.0].t.clone();
        t.grad = None;
        t.requires_grad = false;
        t
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(
        &mut self,
        op: Op,
        shape: Vec<usize>,
        data: Vec<S>,
        name: &'static str,
    ) -> Result<TensorId, TensorError> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        debug_assert_eq!(numel(&shape), data.len());
        let needs = self.op_inputs(&op).iter().any(|id| self.needs(*id));
        self.nodes.push(Node {
            t: Tensor { shape, data, requires_grad: false, grad: None },
            op,
            needs_grad: needs,
        });
        Ok(TensorId(self.nodes.len() - 1))
    }

    fn op_inputs(&self, op: &Op) -> Vec<TensorId> {
        match op {
            Op::Leaf => vec![],
            Op::Unary { x, .. }
            | Op::Clamp { x, .. }
            | Op::AddScalar { x }
            | Op::MulScalar { x, .. }
            | Op::MaxPool2 { x, .. }
            | Op::BilinearResize { x, .. }
            | Op::Softmax { x, .. }
            | Op::SumAll { x }
            | Op::SumAxis { x, .. }
            | Op::MeanAxes { x, .. }
            | Op::Reshape { x }
            | Op::Narrow { x, .. }
            | Op::VecNorm { x, .. }
            | Op::SigmoidBadGrad { x } => vec![*x],
            Op::Binary { a, b, .. } => vec![*a, *b],
            Op::Linear { x, w, b } | Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::SampleBilinear { feat, coords } => vec![*feat, *coords],
            Op::Concat { xs, .. } => xs.clone(),
        }
    }

    // ---- elementwise ----

    fn unary(&mut self, x: TensorId, f: UnaryFn) -> Result<TensorId, TensorError> {
        if f == UnaryFn::Log10 {
            if let Some(bad) = self.nodes[x.0].t.data.iter().find(|v| **v <= S::zero()) {
                return Err(TensorError::Domain {
                    op: "log10",
                    detail: format!("non-positive input {bad}"),
                });
            }
        }
        let xs = self.nodes[x.0].t.shape.clone();
        let data: Vec<S> = self.nodes[x.0].t.data.iter().map(|&v| f.eval(v)).collect();
        self.push(Op::Unary { x, f }, xs, data, f.name())
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.unary(x, UnaryFn::Relu)
    }
    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.unary(x, UnaryFn::Gelu)
    }
    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.unary(x, UnaryFn::Sigmoid)
    }
    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.unary(x, UnaryFn::Tanh)
    }
    pub fn abs(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.unary(x, UnaryFn::Abs)
    }
    pub fn sqrt(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.unary(x, UnaryFn::Sqrt)
    }
    pub fn log10(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.unary(x, UnaryFn::Log10)
    }
    pub fn neg(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.unary(x, UnaryFn::Neg)
    }
    pub fn acos_clamped(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.unary(x, UnaryFn::AcosClamped)
    }
    pub fn sigmoid_bad_grad(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let xs = self.nodes[x.0].t.shape.clone();
        let data: Vec<S> =
            self.nodes[x.0].t.data.iter().map(|&v| UnaryFn::Sigmoid.eval(v)).collect();
        self.push(Op::SigmoidBadGrad { x }, xs, data, "sigmoid_bad_grad")
    }

    pub fn clamp(&mut self, x: TensorId, lo: f64, hi: f64) -> Result<TensorId, TensorError> {
        if !(lo <= hi) {
            return Err(arg_err("clamp", format!("lo {lo} > hi {hi}")));
        }
        let (slo, shi) = (S::from_f64(lo), S::from_f64(hi));
        let xs = self.nodes[x.0].t.shape.clone();
        let data: Vec<S> = self.nodes[x.0]
            .t
            .data
            .iter()
            .map(|&v| if v < slo { slo } else if v > shi { shi } else { v })
            .collect();
        self.push(Op::Clamp { x, lo, hi }, xs, data, "clamp")
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> Result<TensorId, TensorError> {
        let sc = S::from_f64(c);
        let xs = self.nodes[x.0].t.shape.clone();
        let data: Vec<S> = self.nodes[x.0].t.data.iter().map(|&v| v + sc).collect();
        self.push(Op::AddScalar { x }, xs, data, "add_scalar")
    }

    pub fn mul_scalar(&mut self, x: TensorId, c: f64) -> Result<TensorId, TensorError> {
        let sc = S::from_f64(c);
        let xs = self.nodes[x.0].t.shape.clone();
        let data: Vec<S> = self.nodes[x.0].t.data.iter().map(|&v| v * sc).collect();
        self.push(Op::MulScalar { x, c }, xs, data, "mul_scalar")
    }

    fn binary(&mut self, a: TensorId, b: TensorId, f: BinaryFn) -> Result<TensorId, TensorError> {
        let (sa, sb) = (&self.nodes[a.0].t.shape, &self.nodes[b.0].t.shape);
        let out_shape = broadcast_shapes(sa, sb)
            .ok_or_else(|| shape_err(f.name(), format!("{sa:?} vs {sb:?}")))?;
        let (da, db) = (&self.nodes[a.0].t.data, &self.nodes[b.0].t.data);
        let data: Vec<S> = if *sa == *sb {
            da.iter().zip(db.iter()).map(|(&x, &y)| f.eval(x, y)).collect()
        } else {
            let mut w = PairWalker::new(sa, sb, &out_shape);
            let mut out = Vec::with_capacity(numel(&out_shape));
            while let Some((ia, ib)) = w.next() {
                out.push(f.eval(da[ia], db[ib]));
            }
            out
        };
        self.push(Op::Binary { a, b, f }, out_shape, data, f.name())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary(a, b, BinaryFn::Add)
    }
    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary(a, b, BinaryFn::Sub)
    }
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary(a, b, BinaryFn::Mul)
    }
    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary(a, b, BinaryFn::Div)
    }
    /// atan2(y, x) elementwise with broadcasting.
    pub fn atan2(&mut self, y: TensorId, x: TensorId) -> Result<TensorId, TensorError> {
        self.binary(y, x, BinaryFn::Atan2)
    }

    // ---- reductions and views ----

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let mut acc = S::zero();
        for &v in &self.nodes[x.0].t.data {
            acc = acc + v;
        }
        self.push(Op::SumAll { x }, vec![1], vec![acc], "sum_all")
    }

    pub fn mean_all(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let n = self.nodes[x.0].t.numel();
        if n == 0 {
            return Err(arg_err("mean_all", "empty tensor"));
        }
        let s = self.sum_all(x)?;
        self.mul_scalar(s, 1.0 / n as f64)
    }

    pub fn sum_axis(
        &mut self,
        x: TensorId,
        axis: usize,
        keepdim: bool,
    ) -> Result<TensorId, TensorError> {
        let xs = self.nodes[x.0].t.shape.clone();
        if axis >= xs.len() {
            return Err(arg_err("sum_axis", format!("axis {axis} out of rank {}", xs.len())));
        }
        let mut kshape = xs.clone();
        kshape[axis] = 1;
        let mut out = vec![S::zero(); numel(&kshape)];
        {
            let xd = &self.nodes[x.0].t.data;
            let mut w = PairWalker::new(&xs, &kshape, &xs);
            while let Some((ix, io)) = w.next() {
                out[io] = out[io] + xd[ix];
            }
        }
        let out_shape = if keepdim {
            kshape
        } else {
            let mut s = xs.clone();
            s.remove(axis);
            if s.is_empty() {
                vec![1]
            } else {
                s
            }
        };
        self.push(Op::SumAxis { x, axis }, out_shape, out, "sum_axis")
    }

    /// Mean over the given axes (kept as size-1 dims).
    pub fn mean_axes(&mut self, x: TensorId, axes: &[usize]) -> Result<TensorId, TensorError> {
        let xs = self.nodes[x.0].t.shape.clone();
        let mut kshape = xs.clone();
        let mut count = 1usize;
        for &a in axes {
            if a >= xs.len() {
                return Err(arg_err("mean_axes", format!("axis {a} out of rank {}", xs.len())));
            }
            if kshape[a] != 1 || xs[a] == 1 {
                count *= xs[a];
            }
            kshape[a] = 1;
        }
        if count == 0 {
            return Err(arg_err("mean_axes", "empty reduction"));
        }
        let inv = S::from_f64(1.0 / count as f64);
        let mut out = vec![S::zero(); numel(&kshape)];
        {
            let xd = &self.nodes[x.0].t.data;
            let mut w = PairWalker::new(&xs, &kshape, &xs);
            while let Some((ix, io)) = w.next() {
                out[io] = out[io] + xd[ix];
            }
        }
        for v in &mut out {
            *v = *v * inv;
        }
        self.push(Op::MeanAxes { x, axes: axes.to_vec() }, kshape, out, "mean_axes")
    }

    pub fn reshape(&mut self, x: TensorId, new_shape: &[usize]) -> Result<TensorId, TensorError> {
        let xs = &self.nodes[x.0].t.shape;
        if numel(new_shape) != numel(xs) {
            return Err(shape_err("reshape", format!("{xs:?} -> {new_shape:?}")));
        }
        let data = self.nodes[x.0].t.data.clone();
        self.push(Op::Reshape { x }, new_shape.to_vec(), data, "reshape")
    }

    pub fn concat(&mut self, xs: &[TensorId], axis: usize) -> Result<TensorId, TensorError> {
        if xs.is_empty() {
            return Err(arg_err("concat", "no inputs"));
        }
        let first = self.nodes[xs[0].0].t.shape.clone();
        if axis >= first.len() {
            return Err(arg_err("concat", format!("axis {axis} out of rank {}", first.len())));
        }
        let mut axis_total = 0usize;
        for id in xs {
            let s = &self.nodes[id.0].t.shape;
            if s.len() != first.len()
                || s.iter().enumerate().any(|(d, &v)| d != axis && v != first[d])
            {
                return Err(shape_err("concat", format!("{first:?} vs {s:?}")));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![S::zero(); numel(&out_shape)];
        let out_row = axis_total * inner;
        let mut col = 0usize;
        for id in xs {
            let s = &self.nodes[id.0].t.shape;
            let block = s[axis] * inner;
            let d = &self.nodes[id.0].t.data;
            for o in 0..outer {
                out[o * out_row + col..o * out_row + col + block]
                    .copy_from_slice(&d[o * block..(o + 1) * block]);
            }
            col += block;
        }
        self.push(Op::Concat { xs: xs.to_vec(), axis }, out_shape, out, "concat")
    }

    pub fn narrow(
        &mut self,
        x: TensorId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<TensorId, TensorError> {
        let xs = self.nodes[x.0].t.shape.clone();
        if axis >= xs.len() || start + len > xs[axis] || len == 0 {
            return Err(arg_err(
                "narrow",
                format!("axis {axis} range {start}..{} of {:?}", start + len, xs),
            ));
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let mut out_shape = xs.clone();
        out_shape[axis] = len;
        let mut out = vec![S::zero(); outer * len * inner];
        let src_row = xs[axis] * inner;
        let dst_row = len * inner;
        {
            let d = &self.nodes[x.0].t.data;
            for o in 0..outer {
                let src = o * src_row + start * inner;
                out[o * dst_row..(o + 1) * dst_row].copy_from_slice(&d[src..src + dst_row]);
            }
        }
        self.push(Op::Narrow { x, axis, start, len }, out_shape, out, "narrow")
    }

    /// Euclidean norm along `axis`, kept as a size-1 dim. The backward rule
    /// returns zero where the norm vanishes (the true subgradient set there
    /// contains zero, and this keeps parallel-vector angles NaN-free).
    pub fn vec_norm(&mut self, x: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        let xs = self.nodes[x.0].t.shape.clone();
        if axis >= xs.len() {
            return Err(arg_err("vec_norm", format!("axis {axis} out of rank {}", xs.len())));
        }
        let mut kshape = xs.clone();
        kshape[axis] = 1;
        let mut out = vec![S::zero(); numel(&kshape)];
        {
            let xd = &self.nodes[x.0].t.data;
            let mut w = PairWalker::new(&xs, &kshape, &xs);
            while let Some((ix, io)) = w.next() {
                out[io] = out[io] + xd[ix] * xd[ix];
            }
        }
        for v in &mut out {
            *v = v.sqrt();
        }
        self.push(Op::VecNorm { x, axis }, kshape, out, "vec_norm")
    }

    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        let xs = self.nodes[x.0].t.shape.clone();
        if axis >= xs.len() {
            return Err(arg_err("softmax", format!("axis {axis} out of rank {}", xs.len())));
        }
        let n = xs[axis];
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let xd = &self.nodes[x.0].t.data;
        let mut out = vec![S::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut m = xd[base];
                for k in 1..n {
                    let v = xd[base + k * inner];
                    if v > m {
                        m = v;
                    }
                }
                let mut sum = S::zero();
                for k in 0..n {
                    let e = (xd[base + k * inner] - m).exp();
                    out[base + k * inner] = e;
                    sum = sum + e;
                }
                for k in 0..n {
                    out[base + k * inner] = out[base + k * inner] / sum;
                }
            }
        }
        self.push(Op::Softmax { x, axis }, xs, out, "softmax")
    }

    // ---- dense kernels (implementations in kernels.rs / sample.rs) ----

    /// Affine map over the last axis: `y[..., o] = sum_i x[..., i] w[o, i] + b[o]`.
    pub fn linear(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
    ) -> Result<TensorId, TensorError> {
        let (data, shape) = kernels::linear_forward(
            &self.nodes[x.0].t,
            &self.nodes[w.0].t,
            &self.nodes[b.0].t,
        )?;
        self.push(Op::Linear { x, w, b }, shape, data, "linear")
    }

    /// 2D cross-correlation over `[B, C, H, W]`. Height uses zero padding;
    /// width wraps around when `opts.wrap_w` is set (equirectangular seam).
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        opts: Conv2dOpts,
    ) -> Result<TensorId, TensorError> {
        let (data, shape) = kernels::conv2d_forward(
            &self.nodes[x.0].t,
            &self.nodes[w.0].t,
            &self.nodes[b.0].t,
            &opts,
        )?;
        self.push(Op::Conv2d { x, w, b, opts }, shape, data, "conv2d")
    }

    /// 2x2 max pooling with stride 2. Ties resolve to the first maximal
    /// element in row-major window order.
    pub fn maxpool2(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let (data, shape, argmax) = kernels::maxpool2_forward(&self.nodes[x.0].t)?;
        self.push(Op::MaxPool2 { x, argmax }, shape, data, "maxpool2")
    }

    /// Bilinear resize to `(out_h, out_w)` with half-pixel centers
    /// (align_corners = false). Width wraps when `wrap_w` is set.
    pub fn bilinear_resize(
        &mut self,
        x: TensorId,
        out_h: usize,
        out_w: usize,
        wrap_w: bool,
    ) -> Result<TensorId, TensorError> {
        let (data, shape) = kernels::bilinear_resize_forward(&self.nodes[x.0].t, out_h, out_w, wrap_w)?;
        self.push(Op::BilinearResize { x, wrap_w }, shape, data, "bilinear_resize")
    }

    /// Sample `feat [B, C, H, W]` at fractional pixel coordinates
    /// `coords [B, K, 2, Hq, Wq]` (channel 0 = u, 1 = v), producing
    /// `[B, C, K, Hq, Wq]`. u wraps around the width; v clamps to the border.
    /// Gradients flow to both the features and the coordinates.
    pub fn sample_bilinear(
        &mut self,
        feat: TensorId,
        coords: TensorId,
    ) -> Result<TensorId, TensorError> {
        let (data, shape) =
            sample::sample_forward(&self.nodes[feat.0].t, &self.nodes[coords.0].t)?;
        self.push(Op::SampleBilinear { feat, coords }, shape, data, "sample_bilinear")
    }

    // ---- backward ----

    /// Reverse sweep from `loss` (a single-element node). Gradients of
    /// constants and of nodes that no parameter feeds are skipped.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.nodes[loss.0].t.numel() != 1 {
            return Err(arg_err(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.nodes[loss.0].t.shape),
            ));
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(arg_err("backward", "loss does not depend on any gradient leaf"));
        }
        self.nodes[loss.0].t.grad = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].t.grad.take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.node_backward(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].t.grad = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, id: TensorId, delta: Vec<S>) {
        if !self.needs(id) {
            return;
        }
        let node = &mut self.nodes[id.0];
        match &mut node.t.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi = *gi + di;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn node_backward(&mut self, i: usize, op: &Op, g: &[S]) {
        match op {
            Op::Leaf => {}
            Op::Unary { x, f } => {
                if self.needs(*x) {
                    let xd = &self.nodes[x.0].t.data;
                    let yd = &self.nodes[i].t.data;
                    let delta: Vec<S> = g
                        .iter()
                        .zip(xd.iter().zip(yd.iter()))
                        .map(|(&gi, (&xv, &yv))| gi * f.deriv(xv, yv))
                        .collect();
                    self.acc(*x, delta);
                }
            }
            Op::SigmoidBadGrad { x } => {
                if self.needs(*x) {
                    let bias = S::from_f64(1.05);
                    let yd = &self.nodes[i].t.data;
                    let delta: Vec<S> = g
                        .iter()
                        .zip(yd.iter())
                        .map(|(&gi, &yv)| gi * yv * (S::one() - yv) * bias)
                        .collect();
                    self.acc(*x, delta);
                }
            }
            Op::Clamp { x, lo, hi } => {
                if self.needs(*x) {
                    let (slo, shi) = (S::from_f64(*lo), S::from_f64(*hi));
                    let xd = &self.nodes[x.0].t.data;
                    let delta: Vec<S> = g
                        .iter()
                        .zip(xd.iter())
                        .map(|(&gi, &xv)| if xv > slo && xv < shi { gi } else { S::zero() })
                        .collect();
                    self.acc(*x, delta);
                }
            }
            Op::AddScalar { x } => {
                if self.needs(*x) {
                    self.acc(*x, g.to_vec());
                }
            }
            Op::MulScalar { x, c } => {
                if self.needs(*x) {
                    let sc = S::from_f64(*c);
                    self.acc(*x, g.iter().map(|&gi| gi * sc).collect());
                }
            }
            Op::Binary { a, b, f } => {
                let (need_a, need_b) = (self.needs(*a), self.needs(*b));
                if !need_a && !need_b {
                    return;
                }
                let (sa, sb) = (&self.nodes[a.0].t.shape, &self.nodes[b.0].t.shape);
                let (da, db) = (&self.nodes[a.0].t.data, &self.nodes[b.0].t.data);
                let mut ga = if need_a { Some(vec![S::zero(); da.len()]) } else { None };
                let mut gb = if need_b { Some(vec![S::zero(); db.len()]) } else { None };
                if *sa == *sb {
                    for j in 0..g.len() {
                        let (dda, ddb) = f.deriv(da[j], db[j]);
                        if let Some(ga) = ga.as_mut() {
                            ga[j] = ga[j] + g[j] * dda;
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[j] = gb[j] + g[j] * ddb;
                        }
                    }
                } else {
                    let out_shape = &self.nodes[i].t.shape;
                    let mut w = PairWalker::new(sa, sb, out_shape);
                    let mut j = 0usize;
                    while let Some((ia, ib)) = w.next() {
                        let (dda, ddb) = f.deriv(da[ia], db[ib]);
                        if let Some(ga) = ga.as_mut() {
                            ga[ia] = ga[ia] + g[j] * dda;
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[ib] = gb[ib] + g[j] * ddb;
                        }
                        j += 1;
                    }
                }
                if let Some(d) = ga {
                    self.acc(*a, d);
                }
                if let Some(d) = gb {
                    self.acc(*b, d);
                }
            }
            Op::Softmax { x, axis } => {
                if self.needs(*x) {
                    let xs = &self.nodes[i].t.shape;
                    let n = xs[*axis];
                    let outer: usize = xs[..*axis].iter().product();
                    let inner: usize = xs[*axis + 1..].iter().product();
                    let yd = &self.nodes[i].t.data;
                    let mut delta = vec![S::zero(); yd.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * n * inner + ii;
                            let mut dot = S::zero();
                            for k in 0..n {
                                let j = base + k * inner;
                                dot = dot + g[j] * yd[j];
                            }
                            for k in 0..n {
                                let j = base + k * inner;
                                delta[j] = yd[j] * (g[j] - dot);
                            }
                        }
                    }
                    self.acc(*x, delta);
                }
            }
            Op::SumAll { x } => {
                if self.needs(*x) {
                    let n = self.nodes[x.0].t.numel();
                    self.acc(*x, vec![g[0]; n]);
                }
            }
            Op::SumAxis { x, axis } => {
                if self.needs(*x) {
                    let xs = self.nodes[x.0].t.shape.clone();
                    let mut kshape = xs.clone();
                    kshape[*axis] = 1;
                    let mut delta = vec![S::zero(); numel(&xs)];
                    let mut w = PairWalker::new(&xs, &kshape, &xs);
                    while let Some((ix, io)) = w.next() {
                        delta[ix] = g[io];
                    }
                    self.acc(*x, delta);
                }
            }
            Op::MeanAxes { x, axes } => {
                if self.needs(*x) {
                    let xs = self.nodes[x.0].t.shape.clone();
                    let mut kshape = xs.clone();
                    let mut count = 1usize;
                    for &a in axes {
                        if kshape[a] != 1 || xs[a] == 1 {
                            count *= xs[a];
                        }
                        kshape[a] = 1;
                    }
                    let inv = S::from_f64(1.0 / count as f64);
                    let mut delta = vec![S::zero(); numel(&xs)];
                    let mut w = PairWalker::new(&xs, &kshape, &xs);
                    while let Some((ix, io)) = w.next() {
                        delta[ix] = g[io] * inv;
                    }
                    self.acc(*x, delta);
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    self.acc(*x, g.to_vec());
                }
            }
            Op::Concat { xs, axis } => {
                let out_shape = self.nodes[i].t.shape.clone();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let out_row = out_shape[*axis] * inner;
                let mut col = 0usize;
                for id in xs {
                    let s = &self.nodes[id.0].t.shape;
                    let block = s[*axis] * inner;
                    if self.needs(*id) {
                        let mut delta = vec![S::zero(); numel(s)];
                        for o in 0..outer {
                            delta[o * block..(o + 1) * block]
                                .copy_from_slice(&g[o * out_row + col..o * out_row + col + block]);
                        }
                        self.acc(*id, delta);
                    }
                    col += block;
                }
            }
            Op::Narrow { x, axis, start, len } => {
                if self.needs(*x) {
                    let xs = &self.nodes[x.0].t.shape;
                    let outer: usize = xs[..*axis].iter().product();
                    let inner: usize = xs[*axis + 1..].iter().product();
                    let src_row = xs[*axis] * inner;
                    let dst_row = len * inner;
                    let mut delta = vec![S::zero(); numel(xs)];
                    for o in 0..outer {
                        let dst = o * src_row + start * inner;
                        delta[dst..dst + dst_row].copy_from_slice(&g[o * dst_row..(o + 1) * dst_row]);
                    }
                    self.acc(*x, delta);
                }
            }
            Op::VecNorm { x, axis } => {
                if self.needs(*x) {
                    let xs = self.nodes[x.0].t.shape.clone();
                    let mut kshape = xs.clone();
                    kshape[*axis] = 1;
                    let xd = &self.nodes[x.0].t.data;
                    let yd = &self.nodes[i].t.data;
                    let mut delta = vec![S::zero(); xd.len()];
                    let mut w = PairWalker::new(&xs, &kshape, &xs);
                    while let Some((ix, io)) = w.next() {
                        if yd[io] > S::zero() {
                            delta[ix] = g[io] * xd[ix] / yd[io];
                        }
                    }
                    self.acc(*x, delta);
                }
            }
            Op::Linear { x, w, b } => {
                let (gx, gw, gb) = kernels::linear_backward(
                    g,
                    &self.nodes[x.0].t,
                    &self.nodes[w.0].t,
                    self.needs(*x),
                    self.needs(*w),
                    self.needs(*b),
                );
                if let Some(d) = gx {
                    self.acc(*x, d);
                }
                if let Some(d) = gw {
                    self.acc(*w, d);
                }
                if let Some(d) = gb {
                    self.acc(*b, d);
                }
            }
            Op::Conv2d { x, w, b, opts } => {
                let (gx, gw, gb) = kernels::conv2d_backward(
                    g,
                    &self.nodes[i].t.shape,
                    &self.nodes[x.0].t,
                    &self.nodes[w.0].t,
                    opts,
                    self.needs(*x),
                    self.needs(*w),
                    self.needs(*b),
                );
                if let Some(d) = gx {
                    self.acc(*x, d);
                }
                if let Some(d) = gw {
                    self.acc(*w, d);
                }
                if let Some(d) = gb {
                    self.acc(*b, d);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if self.needs(*x) {
                    let n = self.nodes[x.0].t.numel();
                    let mut delta = vec![S::zero(); n];
                    for (j, &src) in argmax.iter().enumerate() {
                        delta[src as usize] = delta[src as usize] + g[j];
                    }
                    self.acc(*x, delta);
                }
            }
            Op::BilinearResize { x, wrap_w } => {
                if self.needs(*x) {
                    let delta = kernels::bilinear_resize_backward(
                        g,
                        &self.nodes[i].t.shape,
                        &self.nodes[x.0].t.shape,
                        *wrap_w,
                    );
                    self.acc(*x, delta);
                }
            }
            Op::SampleBilinear { feat, coords } => {
                let (gf, gc) = sample::sample_backward(
                    g,
                    &self.nodes[feat.0].t,
                    &self.nodes[coords.0].t,
                    self.needs(*feat),
                    self.needs(*coords),
                );
                if let Some(d) = gf {
                    self.acc(*feat, d);
                }
                if let Some(d) = gc {
                    self.acc(*coords, d);
                }
            }
        }
    }
}
