use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use super::{DiffError, ParamId, ParamStore, Real, Tensor};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Operations the graph can record.
///
/// Binary `add`/`sub`/`mul` broadcast their right operand when it is a single
/// element or when its shape is a suffix of the left operand's shape (bias
/// rows). Every other op requires exact shapes.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    MatMul,
    /// `[N,C,H,W] * [O,C,K,K] (+ [O])`, valid padding.
    Conv2d { stride: usize },
    Relu,
    Tanh,
    /// Over the last axis.
    Softmax,
    Exp,
    Log,
    Sqrt,
    Square,
    Abs,
    Add,
    Sub,
    Mul,
    ScalarMul(f64),
    AddScalar(f64),
    /// Mean of all elements, rank-0 result.
    Mean,
    /// Sum of all elements, rank-0 result.
    Sum,
    /// Sum over the last axis, keeping it with size 1.
    SumLast,
    Concat { axis: usize },
    /// Elementwise minimum of two same-shape tensors.
    Min,
    /// `mean + exp(log_std) * noise`.
    GaussianSample,
    /// Diagonal Gaussian log density of `x` given `mean`, `log_std`, summed over the last axis.
    GaussianLogDensity,
    /// Edge-replication padding of the two spatial axes of `[N,C,H,W]`.
    PadEdge { pad: usize },
    Reshape(Vec<usize>),
    /// Slice `[start, start+len)` of the last axis.
    Narrow { start: usize, len: usize },
    Clamp { lo: f64, hi: f64 },
    /// Rows of the first axis in the given order (repeats allowed).
    GatherRows(Vec<usize>),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::Relu => "relu",
            Primitive::Tanh => "tanh",
            Primitive::Softmax => "softmax",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Sqrt => "sqrt",
            Primitive::Square => "square",
            Primitive::Abs => "abs",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::ScalarMul(_) => "scalar-mul",
            Primitive::AddScalar(_) => "add-scalar",
            Primitive::Mean => "mean",
            Primitive::Sum => "sum",
            Primitive::SumLast => "sum-last",
            Primitive::Concat { .. } => "concat",
            Primitive::Min => "min",
            Primitive::GaussianSample => "gaussian-sample",
            Primitive::GaussianLogDensity => "gaussian-log-density",
            Primitive::PadEdge { .. } => "pad-edge",
            Primitive::Reshape(_) => "reshape",
            Primitive::Narrow { .. } => "narrow",
            Primitive::Clamp { .. } => "clamp",
            Primitive::GatherRows(_) => "gather-rows",
        }
    }

    fn arity(&self) -> std::ops::RangeInclusive<usize> {
        match self {
            Primitive::Concat { .. } => 1..=usize::MAX,
            Primitive::Conv2d { .. } => 2..=3,
            Primitive::GaussianSample | Primitive::GaussianLogDensity => 3..=3,
            Primitive::MatMul | Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Min => 2..=2,
            _ => 1..=1,
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses `name` or `name:arg[,arg]` (e.g. `conv2d:2`, `concat:1`,
/// `scalar-mul:0.5`, `clamp:-1,1`).
impl FromStr for Primitive {
    type Err = DiffError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let bad = || DiffError::UnknownPrimitive(s.to_string());
        let num = |a: Option<&str>| -> Result<f64, DiffError> {
            a.ok_or_else(bad)?.trim().parse::<f64>().map_err(|_| bad())
        };
        let uint = |a: Option<&str>, default: usize| -> Result<usize, DiffError> {
            match a {
                None => Ok(default),
                Some(a) => a.trim().parse::<usize>().map_err(|_| bad()),
            }
        };
        let pair = |a: Option<&str>| -> Result<(f64, f64), DiffError> {
            let (x, y) = a.ok_or_else(bad)?.split_once(',').ok_or_else(bad)?;
            Ok((
                x.trim().parse().map_err(|_| bad())?,
                y.trim().parse().map_err(|_| bad())?,
            ))
        };
        Ok(match name {
            "matmul" => Primitive::MatMul,
            "conv2d" => Primitive::Conv2d {
                stride: uint(arg, 1)?,
            },
            "relu" => Primitive::Relu,
            "tanh" => Primitive::Tanh,
            "softmax" => Primitive::Softmax,
            "exp" => Primitive::Exp,
            "log" => Primitive::Log,
            "sqrt" => Primitive::Sqrt,
            "square" => Primitive::Square,
            "abs" => Primitive::Abs,
            "add" => Primitive::Add,
            "sub" => Primitive::Sub,
            "mul" => Primitive::Mul,
            "scalar-mul" => Primitive::ScalarMul(num(arg)?),
            "add-scalar" => Primitive::AddScalar(num(arg)?),
            "mean" => Primitive::Mean,
            "sum" => Primitive::Sum,
            "sum-last" => Primitive::SumLast,
            "concat" => Primitive::Concat { axis: uint(arg, 0)? },
            "min" => Primitive::Min,
            "gaussian-sample" => Primitive::GaussianSample,
            "gaussian-log-density" => Primitive::GaussianLogDensity,
            "pad-edge" => Primitive::PadEdge { pad: uint(arg, 0)? },
            "clamp" => {
                let (lo, hi) = pair(arg)?;
                Primitive::Clamp { lo, hi }
            }
            "gather-rows" => Primitive::GatherRows(
                arg.ok_or_else(bad)?
                    .split(',')
                    .map(|v| v.trim().parse::<usize>().map_err(|_| bad()))
                    .collect::<Result<_, _>>()?,
            ),
            _ => return Err(bad()),
        })
    }
}

/// Node handle inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Deliberate faults for mutation-testing the gradient checker.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    FlipAbsGrad,
}

struct Node<T> {
    value: Tensor<T>,
    op: Option<Primitive>,
    inputs: Vec<usize>,
    requires_grad: bool,
}

/// Tape of primitive applications, topologically ordered by construction.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, usize>,
    frozen: HashSet<ParamId>,
    no_grad: bool,
    mutation: Option<Mutation>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            frozen: HashSet::new(),
            no_grad: false,
            mutation: None,
        }
    }

    /// A graph that never tracks gradients (inference / target computation).
    pub fn no_grad() -> Self {
        Self {
            no_grad: true,
            ..Self::new()
        }
    }

    #[doc(hidden)]
    pub fn set_mutation(&mut self, mutation: Option<Mutation>) {
        self.mutation = mutation;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameters bound after this call enter the graph as constants.
    pub fn freeze(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        self.frozen.extend(ids);
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, None, Vec::new(), requires_grad && !self.no_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(T::of(value)))
    }

    /// Binds a stored parameter. Repeated binds of the same id share one leaf,
    /// so gradients from every use accumulate.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&node) = self.params.get(&id) {
            return Var(node);
        }
        let trainable = !self.frozen.contains(&id);
        let var = self.leaf(store.get(id).clone(), trainable);
        self.params.insert(id, var.0);
        var
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Option<Primitive>, inputs: Vec<usize>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Value-identical copy detached from everything upstream.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.push(value, None, Vec::new(), false)
    }

    /// Applies one primitive, recording it when any input tracks gradients.
    pub fn apply(&mut self, op: Primitive, inputs: &[Var]) -> Result<Var, DiffError> {
        if !op.arity().contains(&inputs.len()) {
            return Err(DiffError::Arity {
                op: op.name(),
                got: inputs.len(),
            });
        }
        let values: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = forward(&op, &values)?;
        let requires_grad = !self.no_grad && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let ids = inputs.iter().map(|v| v.0).collect();
        Ok(self.push(out, Some(op), ids, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize) -> Result<Var, DiffError> {
        match bias {
            Some(b) => self.apply(Primitive::Conv2d { stride }, &[x, w, b]),
            None => self.apply(Primitive::Conv2d { stride }, &[x, w]),
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, DiffError> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, DiffError> {
        self.apply(Primitive::Tanh, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var, DiffError> {
        self.apply(Primitive::Softmax, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, DiffError> {
        self.apply(Primitive::Exp, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var, DiffError> {
        self.apply(Primitive::Log, &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, DiffError> {
        self.apply(Primitive::Sqrt, &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var, DiffError> {
        self.apply(Primitive::Square, &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, DiffError> {
        self.apply(Primitive::Abs, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var, DiffError> {
        self.apply(Primitive::ScalarMul(s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var, DiffError> {
        self.apply(Primitive::AddScalar(s), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, DiffError> {
        self.apply(Primitive::Mean, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, DiffError> {
        self.apply(Primitive::Sum, &[x])
    }

    pub fn sum_last(&mut self, x: Var) -> Result<Var, DiffError> {
        self.apply(Primitive::SumLast, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, DiffError> {
        self.apply(Primitive::Concat { axis }, xs)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.apply(Primitive::Min, &[a, b])
    }

    pub fn gaussian_sample(&mut self, mean: Var, log_std: Var, noise: Var) -> Result<Var, DiffError> {
        self.apply(Primitive::GaussianSample, &[mean, log_std, noise])
    }

    pub fn gaussian_log_density(&mut self, x: Var, mean: Var, log_std: Var) -> Result<Var, DiffError> {
        self.apply(Primitive::GaussianLogDensity, &[x, mean, log_std])
    }

    pub fn pad_edge(&mut self, x: Var, pad: usize) -> Result<Var, DiffError> {
        self.apply(Primitive::PadEdge { pad }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, DiffError> {
        self.apply(Primitive::Reshape(shape.to_vec()), &[x])
    }

    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        self.apply(Primitive::Narrow { start, len }, &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, DiffError> {
        self.apply(Primitive::Clamp { lo, hi }, &[x])
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var, DiffError> {
        self.apply(Primitive::GatherRows(indices.to_vec()), &[x])
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, DiffError> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(DiffError::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(DiffError::NotConnected);
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let wanted: Vec<bool> = node.inputs.iter().map(|&i| self.nodes[i].requires_grad).collect();
            let input_grads = backward_rule(op, &inputs, &node.value, &dy, &wanted, self.mutation)?;
            for ((&i, want), g) in node.inputs.iter().zip(wanted).zip(input_grads) {
                if !want {
                    continue;
                }
                let Some(g) = g else { continue };
                match &mut grads[i] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.iter().map(|(&id, &node)| (id, node)).collect(),
        })
    }
}

/// Result of a backward sweep: gradients of the leaves reached from the loss.
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, usize>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn wrt_param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|&n| self.grads[n].as_ref())
    }

    /// Max |g| over the given parameters; absent gradients count as zero.
    pub fn max_abs(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .filter_map(|&id| self.wrt_param(id))
            .flat_map(|g| g.data().iter().map(|v| v.as_f64().abs()))
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::all_finite)
    }
}

fn shape_err<T: Real>(op: &Primitive, inputs: &[&Tensor<T>]) -> DiffError {
    DiffError::Shape {
        op: op.name(),
        shapes: inputs.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

fn broadcastable<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> bool {
    b.numel() == 1 || a.shape() == b.shape() || (b.rank() <= a.rank() && a.shape().ends_with(b.shape()))
}

fn unary<T: Real>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    x.map(f)
}

fn conv_out(h: usize, k: usize, stride: usize) -> usize {
    (h - k) / stride + 1
}

/// Per-sample im2col: `cols[(c,ki,kj), (oh,ow)]`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, cols: &mut [T]) {
    let (ho, wo) = (conv_out(h, kh, stride), conv_out(w, kw, stride));
    let plane = ho * wo;
    let mut row = 0;
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oh in 0..ho {
                    let src_row = &xc[(oh * stride + ki) * w..];
                    let d = &mut dst[oh * wo..(oh + 1) * wo];
                    if stride == 1 {
                        d.copy_from_slice(&src_row[kj..kj + wo]);
                    } else {
                        for (ow, v) in d.iter_mut().enumerate() {
                            *v = src_row[ow * stride + kj];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, dx: &mut [T]) {
    let (ho, wo) = (conv_out(h, kh, stride), conv_out(w, kw, stride));
    let plane = ho * wo;
    let mut row = 0;
    for ci in 0..c {
        let dxc = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let src = &cols[row * plane..(row + 1) * plane];
                for oh in 0..ho {
                    let base = (oh * stride + ki) * w + kj;
                    for ow in 0..wo {
                        dxc[base + ow * stride] += src[oh * wo + ow];
                    }
                }
                row += 1;
            }
        }
    }
}

fn forward<T: Real>(op: &Primitive, x: &[&Tensor<T>]) -> Result<Tensor<T>, DiffError> {
    let err = || shape_err(op, x);
    let out = match op {
        Primitive::MatMul => {
            let (a, b) = (x[0], x[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(err());
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![T::zero(); m * n];
            T::gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
            Tensor::new(&[m, n], out)?
        }
        Primitive::Conv2d { stride } => {
            let (inp, wt) = (x[0], x[1]);
            if inp.rank() != 4 || wt.rank() != 4 || inp.shape()[1] != wt.shape()[1] || *stride == 0 {
                return Err(err());
            }
            let [n, c, h, w] = [inp.shape()[0], inp.shape()[1], inp.shape()[2], inp.shape()[3]];
            let [o, _, kh, kw] = [wt.shape()[0], wt.shape()[1], wt.shape()[2], wt.shape()[3]];
            if h < kh || w < kw {
                return Err(err());
            }
            if let Some(b) = x.get(2) {
                if b.shape() != [o] {
                    return Err(err());
                }
            }
            let (ho, wo) = (conv_out(h, kh, *stride), conv_out(w, kw, *stride));
            let ckk = c * kh * kw;
            let plane = ho * wo;
            let mut cols = vec![T::zero(); ckk * plane];
            let mut out = vec![T::zero(); n * o * plane];
            for s in 0..n {
                im2col(&inp.data()[s * c * h * w..(s + 1) * c * h * w], c, h, w, kh, kw, *stride, &mut cols);
                let y = &mut out[s * o * plane..(s + 1) * o * plane];
                T::gemm(o, ckk, plane, wt.data(), false, &cols, false, y, false);
                if let Some(b) = x.get(2) {
                    for (oi, bv) in b.data().iter().enumerate() {
                        y[oi * plane..(oi + 1) * plane].iter_mut().for_each(|v| *v += *bv);
                    }
                }
            }
            Tensor::new(&[n, o, ho, wo], out)?
        }
        Primitive::Relu => unary(x[0], |v| if v > T::zero() { v } else { T::zero() }),
        Primitive::Tanh => unary(x[0], |v| v.tanh()),
        Primitive::Exp => unary(x[0], |v| v.exp()),
        Primitive::Log => unary(x[0], |v| v.ln()),
        Primitive::Sqrt => unary(x[0], |v| v.sqrt()),
        Primitive::Square => unary(x[0], |v| v * v),
        Primitive::Abs => unary(x[0], |v| v.abs()),
        Primitive::ScalarMul(s) => {
            let s = T::of(*s);
            unary(x[0], |v| v * s)
        }
        Primitive::AddScalar(s) => {
            let s = T::of(*s);
            unary(x[0], |v| v + s)
        }
        Primitive::Softmax => {
            let t = x[0];
            if t.rank() == 0 {
                return Err(err());
            }
            let n = *t.shape().last().unwrap();
            let mut out = t.data().to_vec();
            for row in out.chunks_mut(n.max(1)) {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v = *v / z;
                }
            }
            Tensor::new(t.shape(), out)?
        }
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let (a, b) = (x[0], x[1]);
            if !broadcastable(a, b) {
                return Err(err());
            }
            let rn = b.numel();
            let bd = b.data();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &av)| {
                    let bv = bd[i % rn];
                    match op {
                        Primitive::Add => av + bv,
                        Primitive::Sub => av - bv,
                        _ => av * bv,
                    }
                })
                .collect();
            Tensor::new(a.shape(), data)?
        }
        Primitive::Min => {
            let (a, b) = (x[0], x[1]);
            if a.shape() != b.shape() {
                return Err(err());
            }
            let data = a.data().iter().zip(b.data()).map(|(&p, &q)| if p <= q { p } else { q }).collect();
            Tensor::new(a.shape(), data)?
        }
        Primitive::Mean | Primitive::Sum => {
            let t = x[0];
            let s = t.data().iter().fold(T::zero(), |acc, &v| acc + v);
            let s = if matches!(op, Primitive::Mean) {
                s / T::of(t.numel().max(1) as f64)
            } else {
                s
            };
            Tensor::scalar(s)
        }
        Primitive::SumLast => {
            let t = x[0];
            if t.rank() == 0 {
                return Err(err());
            }
            let n = *t.shape().last().unwrap();
            let data = t.data().chunks(n.max(1)).map(|r| r.iter().fold(T::zero(), |a, &v| a + v)).collect();
            let mut shape = t.shape().to_vec();
            *shape.last_mut().unwrap() = 1;
            Tensor::new(&shape, data)?
        }
        Primitive::Concat { axis } => {
            let first = x[0];
            let axis = *axis;
            if axis >= first.rank() {
                return Err(err());
            }
            for t in x.iter() {
                if t.rank() != first.rank()
                    || t.shape()[..axis] != first.shape()[..axis]
                    || t.shape()[axis + 1..] != first.shape()[axis + 1..]
                {
                    return Err(err());
                }
            }
            let outer: usize = first.shape()[..axis].iter().product();
            let inner: usize = first.shape()[axis + 1..].iter().product();
            let total_axis: usize = x.iter().map(|t| t.shape()[axis]).sum();
            let mut data = Vec::with_capacity(outer * total_axis * inner);
            for o in 0..outer {
                for t in x.iter() {
                    let block = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                }
            }
            let mut shape = first.shape().to_vec();
            shape[axis] = total_axis;
            Tensor::new(&shape, data)?
        }
        Primitive::GaussianSample => {
            let (m, ls, e) = (x[0], x[1], x[2]);
            if m.shape() != ls.shape() || m.shape() != e.shape() {
                return Err(err());
            }
            let data = (0..m.numel())
                .map(|i| m.data()[i] + ls.data()[i].exp() * e.data()[i])
                .collect();
            Tensor::new(m.shape(), data)?
        }
        Primitive::GaussianLogDensity => {
            let (v, m, ls) = (x[0], x[1], x[2]);
            if v.shape() != m.shape() || v.shape() != ls.shape() || v.rank() == 0 {
                return Err(err());
            }
            let k = *v.shape().last().unwrap();
            let c = T::of(HALF_LN_2PI);
            let half = T::of(0.5);
            let data = (0..v.numel() / k.max(1))
                .map(|r| {
                    (r * k..(r + 1) * k).fold(T::zero(), |acc, i| {
                        let z = (v.data()[i] - m.data()[i]) * (-ls.data()[i]).exp();
                        acc - half * z * z - ls.data()[i] - c
                    })
                })
                .collect();
            let mut shape = v.shape().to_vec();
            *shape.last_mut().unwrap() = 1;
            Tensor::new(&shape, data)?
        }
        Primitive::PadEdge { pad } => {
            let t = x[0];
            if t.rank() != 4 {
                return Err(err());
            }
            pad_edge(t, *pad)
        }
        Primitive::Reshape(shape) => {
            if shape.iter().product::<usize>() != x[0].numel() {
                return Err(err());
            }
            x[0].clone().reshaped(shape)?
        }
        Primitive::Narrow { start, len } => {
            let t = x[0];
            let n = *t.shape().last().ok_or_else(err)?;
            if start + len > n {
                return Err(err());
            }
            let data = t.data().chunks(n).flat_map(|r| r[*start..start + len].iter().copied()).collect();
            let mut shape = t.shape().to_vec();
            *shape.last_mut().unwrap() = *len;
            Tensor::new(&shape, data)?
        }
        Primitive::Clamp { lo, hi } => {
            let (lo, hi) = (T::of(*lo), T::of(*hi));
            unary(x[0], |v| v.max(lo).min(hi))
        }
        Primitive::GatherRows(indices) => {
            let t = x[0];
            let rows = *t.shape().first().ok_or_else(err)?;
            if indices.iter().any(|&i| i >= rows) {
                return Err(err());
            }
            t.gather_rows(indices)
        }
    };
    Ok(out)
}

fn pad_edge<T: Real>(t: &Tensor<T>, pad: usize) -> Tensor<T> {
    let [n, c, h, w] = [t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]];
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = Vec::with_capacity(n * c * hp * wp);
    for plane in t.data().chunks(h * w) {
        for i in 0..hp {
            let si = i.saturating_sub(pad).min(h - 1);
            for j in 0..wp {
                let sj = j.saturating_sub(pad).min(w - 1);
                out.push(plane[si * w + sj]);
            }
        }
    }
    Tensor::new(&[n, c, hp, wp], out).expect("pad shape")
}

type InputGrads<T> = Vec<Option<Tensor<T>>>;

fn backward_rule<T: Real>(
    op: &Primitive,
    x: &[&Tensor<T>],
    y: &Tensor<T>,
    dy: &Tensor<T>,
    wanted: &[bool],
    mutation: Option<Mutation>,
) -> Result<InputGrads<T>, DiffError> {
    let zero = T::zero();
    let elementwise = |f: &dyn Fn(usize) -> T| -> Tensor<T> {
        let data = (0..x[0].numel()).map(f).collect();
        Tensor::new(x[0].shape(), data).expect("elementwise grad shape")
    };
    let g = match op {
        Primitive::MatMul => {
            let (a, b) = (x[0], x[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let da = wanted[0].then(|| {
                let mut da = vec![zero; m * k];
                T::gemm(m, n, k, dy.data(), false, b.data(), true, &mut da, false);
                Tensor::new(&[m, k], da).unwrap()
            });
            let db = wanted[1].then(|| {
                let mut db = vec![zero; k * n];
                T::gemm(k, m, n, a.data(), true, dy.data(), false, &mut db, false);
                Tensor::new(&[k, n], db).unwrap()
            });
            vec![da, db]
        }
        Primitive::Conv2d { stride } => {
            let (inp, wt) = (x[0], x[1]);
            let [n, c, h, w] = [inp.shape()[0], inp.shape()[1], inp.shape()[2], inp.shape()[3]];
            let [o, _, kh, kw] = [wt.shape()[0], wt.shape()[1], wt.shape()[2], wt.shape()[3]];
            let (ho, wo) = (conv_out(h, kh, *stride), conv_out(w, kw, *stride));
            let plane = ho * wo;
            let ckk = c * kh * kw;
            let mut cols = vec![zero; ckk * plane];
            let mut dw = wanted[1].then(|| vec![zero; o * ckk]);
            let mut dx = wanted[0].then(|| vec![zero; inp.numel()]);
            for s in 0..n {
                let dys = &dy.data()[s * o * plane..(s + 1) * o * plane];
                if let Some(dw) = dw.as_mut() {
                    im2col(&inp.data()[s * c * h * w..(s + 1) * c * h * w], c, h, w, kh, kw, *stride, &mut cols);
                    T::gemm(o, plane, ckk, dys, false, &cols, true, dw, true);
                }
                if let Some(dx) = dx.as_mut() {
                    T::gemm(ckk, o, plane, wt.data(), true, dys, false, &mut cols, false);
                    col2im(&cols, c, h, w, kh, kw, *stride, &mut dx[s * c * h * w..(s + 1) * c * h * w]);
                }
            }
            let mut out = vec![
                dx.map(|d| Tensor::new(inp.shape(), d).unwrap()),
                dw.map(|d| Tensor::new(wt.shape(), d).unwrap()),
            ];
            if x.len() == 3 {
                out.push(wanted[2].then(|| {
                    let mut db = vec![zero; o];
                    for s in 0..n {
                        for (oi, acc) in db.iter_mut().enumerate() {
                            let start = (s * o + oi) * plane;
                            *acc += dy.data()[start..start + plane].iter().fold(zero, |a, &v| a + v);
                        }
                    }
                    Tensor::new(&[o], db).unwrap()
                }));
            }
            out
        }
        Primitive::Relu => {
            let xd = x[0].data();
            vec![Some(elementwise(&|i| if xd[i] > zero { dy.data()[i] } else { zero }))]
        }
        Primitive::Tanh => {
            let yd = y.data();
            vec![Some(elementwise(&|i| dy.data()[i] * (T::one() - yd[i] * yd[i])))]
        }
        Primitive::Exp => vec![Some(elementwise(&|i| dy.data()[i] * y.data()[i]))],
        Primitive::Log => vec![Some(elementwise(&|i| dy.data()[i] / x[0].data()[i]))],
        Primitive::Sqrt => vec![Some(elementwise(&|i| dy.data()[i] / (T::of(2.0) * y.data()[i])))],
        Primitive::Square => vec![Some(elementwise(&|i| dy.data()[i] * T::of(2.0) * x[0].data()[i]))],
        Primitive::Abs => {
            let flip = if mutation == Some(Mutation::FlipAbsGrad) { -T::one() } else { T::one() };
            vec![Some(elementwise(&|i| {
                let v = x[0].data()[i];
                let s = if v > zero {
                    T::one()
                } else if v < zero {
                    -T::one()
                } else {
                    zero
                };
                dy.data()[i] * s * flip
            }))]
        }
        Primitive::ScalarMul(s) => {
            let s = T::of(*s);
            vec![Some(elementwise(&|i| dy.data()[i] * s))]
        }
        Primitive::AddScalar(_) => vec![Some(dy.clone())],
        Primitive::Softmax => {
            let n = *y.shape().last().unwrap();
            let mut dx = vec![zero; y.numel()];
            for ((yr, dyr), dxr) in y.data().chunks(n).zip(dy.data().chunks(n)).zip(dx.chunks_mut(n)) {
                let dot = yr.iter().zip(dyr).fold(zero, |a, (&p, &q)| a + p * q);
                for j in 0..n {
                    dxr[j] = yr[j] * (dyr[j] - dot);
                }
            }
            vec![Some(Tensor::new(y.shape(), dx).unwrap())]
        }
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let (a, b) = (x[0], x[1]);
            let rn = b.numel();
            let da = wanted[0].then(|| match op {
                Primitive::Mul => {
                    let bd = b.data();
                    Tensor::new(a.shape(), dy.data().iter().enumerate().map(|(i, &g)| g * bd[i % rn]).collect())
                        .unwrap()
                }
                _ => dy.clone(),
            });
            let db = wanted[1].then(|| {
                let mut acc = vec![zero; rn];
                for (i, &g) in dy.data().iter().enumerate() {
                    acc[i % rn] += match op {
                        Primitive::Add => g,
                        Primitive::Sub => -g,
                        _ => g * a.data()[i],
                    };
                }
                Tensor::new(b.shape(), acc).unwrap()
            });
            vec![da, db]
        }
        Primitive::Min => {
            let (a, b) = (x[0], x[1]);
            let pick_a = |i: usize| a.data()[i] <= b.data()[i];
            let da = wanted[0].then(|| elementwise(&|i| if pick_a(i) { dy.data()[i] } else { zero }));
            let db = wanted[1].then(|| elementwise(&|i| if pick_a(i) { zero } else { dy.data()[i] }));
            vec![da, db]
        }
        Primitive::Mean | Primitive::Sum => {
            let g = dy.item();
            let g = if matches!(op, Primitive::Mean) {
                g / T::of(x[0].numel().max(1) as f64)
            } else {
                g
            };
            vec![Some(Tensor::full(x[0].shape(), g))]
        }
        Primitive::SumLast => {
            let n = *x[0].shape().last().unwrap();
            vec![Some(elementwise(&|i| dy.data()[i / n.max(1)]))]
        }
        Primitive::Concat { axis } => {
            let axis = *axis;
            let outer: usize = x[0].shape()[..axis].iter().product();
            let inner: usize = x[0].shape()[axis + 1..].iter().product();
            let total = y.shape()[axis] * inner;
            let mut offset = 0;
            let mut out = Vec::with_capacity(x.len());
            for (t, want) in x.iter().zip(wanted) {
                let block = t.shape()[axis] * inner;
                if *want {
                    let mut data = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let start = o * total + offset;
                        data.extend_from_slice(&dy.data()[start..start + block]);
                    }
                    out.push(Some(Tensor::new(t.shape(), data).unwrap()));
                } else {
                    out.push(None);
                }
                offset += block;
            }
            out
        }
        Primitive::GaussianSample => {
            let (ls, e) = (x[1], x[2]);
            let dm = wanted[0].then(|| dy.clone());
            let dls = wanted[1].then(|| elementwise(&|i| dy.data()[i] * ls.data()[i].exp() * e.data()[i]));
            let de = wanted[2].then(|| elementwise(&|i| dy.data()[i] * ls.data()[i].exp()));
            vec![dm, dls, de]
        }
        Primitive::GaussianLogDensity => {
            let (v, m, ls) = (x[0], x[1], x[2]);
            let k = *v.shape().last().unwrap();
            let z = |i: usize| (v.data()[i] - m.data()[i]) * (-ls.data()[i]).exp();
            let inv_s = |i: usize| (-ls.data()[i]).exp();
            let up = |i: usize| dy.data()[i / k];
            let dv = wanted[0].then(|| elementwise(&|i| -up(i) * z(i) * inv_s(i)));
            let dm = wanted[1].then(|| elementwise(&|i| up(i) * z(i) * inv_s(i)));
            let dls = wanted[2].then(|| elementwise(&|i| up(i) * (z(i) * z(i) - T::one())));
            vec![dv, dm, dls]
        }
        Primitive::PadEdge { pad } => {
            let t = x[0];
            let [_, _, h, w] = [t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]];
            let (hp, wp) = (h + 2 * pad, w + 2 * pad);
            let mut dx = vec![zero; t.numel()];
            for (plane, dplane) in dx.chunks_mut(h * w).zip(dy.data().chunks(hp * wp)) {
                for i in 0..hp {
                    let si = i.saturating_sub(*pad).min(h - 1);
                    for j in 0..wp {
                        let sj = j.saturating_sub(*pad).min(w - 1);
                        plane[si * w + sj] += dplane[i * wp + j];
                    }
                }
            }
            vec![Some(Tensor::new(t.shape(), dx).unwrap())]
        }
        Primitive::Reshape(_) => vec![Some(dy.clone().reshaped(x[0].shape())?)],
        Primitive::Narrow { start, len } => {
            let n = *x[0].shape().last().unwrap();
            let mut dx = vec![zero; x[0].numel()];
            for (row, drow) in dx.chunks_mut(n).zip(dy.data().chunks(*len)) {
                row[*start..start + len].copy_from_slice(drow);
            }
            vec![Some(Tensor::new(x[0].shape(), dx).unwrap())]
        }
        Primitive::Clamp { lo, hi } => {
            let (lo, hi) = (T::of(*lo), T::of(*hi));
            vec![Some(elementwise(&|i| {
                let v = x[0].data()[i];
                if v >= lo && v <= hi {
                    dy.data()[i]
                } else {
                    zero
                }
            }))]
        }
        Primitive::GatherRows(indices) => {
            let row = x[0].numel() / x[0].shape()[0];
            let mut dx = vec![zero; x[0].numel()];
            for (k, &i) in indices.iter().enumerate() {
                for (a, &b) in dx[i * row..(i + 1) * row].iter_mut().zip(&dy.data()[k * row..(k + 1) * row]) {
                    *a += b;
                }
            }
            vec![Some(Tensor::new(x[0].shape(), dx).unwrap())]
        }
    };
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn spec_forward_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[0.0, 0.0]));
        let s = g.softmax(x).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
        let x = g.constant(t(&[2], &[-1.0, 2.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);
        let img = g.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
        let k = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(img, k, None, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[9.0; 4]);
    }

    #[test]
    fn spec_backward_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let l = g.square(x).unwrap();
        assert_eq!(g.backward(l).unwrap().wrt(x).unwrap().item(), 6.0);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[4], 1.0), true);
        let l = g.mean(x).unwrap();
        assert_eq!(g.backward(l).unwrap().wrt(x).unwrap().data(), &[0.25; 4]);

        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::scalar(2.0), true);
        let b = g.leaf(Tensor::scalar(5.0), true);
        let d = g.sub(a, b).unwrap();
        let l = g.abs(d).unwrap();
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.wrt(a).unwrap().item(), -1.0);
        assert_eq!(gr.wrt(b).unwrap().item(), 1.0);

        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::scalar(2.0), true);
        let d = g.sub(a, a).unwrap();
        let l = g.abs(d).unwrap();
        assert_eq!(g.backward(l).unwrap().wrt(a).unwrap().item(), 0.0);
    }

    #[test]
    fn stop_gradient_semantics() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(2.0), true);
        let s = g.stop_gradient(x);
        let ss = g.stop_gradient(s);
        assert_eq!(g.value(ss), g.value(x));
        let y = g.mul(s, x).unwrap();
        assert_eq!(g.backward(y).unwrap().wrt(x).unwrap().item(), 2.0);
        assert!(!g.requires_grad(ss));
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]), true);
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(DiffError::Shape { op, shapes }) => {
                assert_eq!(op, "matmul");
                assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(g.backward(a), Err(DiffError::NonScalarLoss(_))));
        let c = g.scalar(1.0);
        assert!(matches!(g.backward(c), Err(DiffError::NotConnected)));
        assert!("frobnicate".parse::<Primitive>().is_err());
        assert_eq!("conv2d:2".parse::<Primitive>().unwrap(), Primitive::Conv2d { stride: 2 });
        assert!(matches!(g.apply(Primitive::Relu, &[a, b]), Err(DiffError::Arity { .. })));
    }

    #[test]
    fn no_grad_graph_records_nothing_trainable() {
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("w", Tensor::scalar(1.0)).unwrap();
        let mut g = Graph::no_grad();
        let w = g.param(&ps, id);
        let y = g.square(w).unwrap();
        assert!(!g.requires_grad(y));
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut ps = ParamStore::<f64>::new();
        let a = ps.add("a", Tensor::scalar(1.0)).unwrap();
        let b = ps.add("b", Tensor::scalar(2.0)).unwrap();
        let mut g = Graph::new();
        g.freeze([b]);
        let (va, vb) = (g.param(&ps, a), g.param(&ps, b));
        let y = g.mul(va, vb).unwrap();
        let gr = g.backward(y).unwrap();
        assert_eq!(gr.wrt_param(a).unwrap().item(), 2.0);
        assert!(gr.wrt_param(b).is_none());
    }
}
