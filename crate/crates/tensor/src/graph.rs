//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Var::backward`] on a scalar walks the tape in reverse creation order and
//! returns the [`Gradients`] of every node that depends on a tracked leaf.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::kernels::{self, Axis, ConvGeometry};
use crate::params::{ParamId, ParamSet};
use crate::scalar::{pairwise_sum, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
enum Unary<T> {
    Abs,
    Square,
    Sqrt,
    Ln,
    Exp,
    Powf(T),
    Sigmoid,
    Relu,
    LeakyRelu(T),
    Softplus,
    Clamp(T, T),
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Min(usize, usize),
    AddScalar(usize),
    MulScalar(usize, T),
    Unary(usize, Unary<T>),
    Sum(usize),
    Mean(usize),
    SumPerSample(usize),
    Reshape(usize),
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeometry },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Rc<Tensor<T>>, inv_std: Vec<T> },
    ChannelAffine { x: usize, scale: usize, shift: usize },
    Linear { x: usize, w: usize, b: Option<usize> },
    Upsample2(usize),
    AvgPool2(usize),
    Concat(usize, usize),
    SelectChannel(usize, usize),
    Softmax(usize),
    Filter { x: usize, taps: Vec<T>, axis: Axis },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording tape. Nodes are append-only; a graph is typically built for one
/// optimization step and dropped afterwards.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    bindings: RefCell<HashMap<(u64, usize), usize>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), bindings: RefCell::new(HashMap::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn tracks(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Untracked input.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// Tracked input whose gradient can be read back from [`Gradients::get`].
    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Binds entry `id` of `set`. Tracked bindings are memoized so a parameter
    /// used twice in one graph accumulates into a single gradient.
    pub fn param(&self, set: &ParamSet<T>, id: ParamId, track: bool) -> Var<'_, T> {
        if !track {
            return self.constant(set.get(id).clone());
        }
        let key = (set.uid(), id.index());
        if let Some(&node) = self.bindings.borrow().get(&key) {
            return Var { graph: self, id: node };
        }
        let v = self.variable(set.get(id).clone());
        self.bindings.borrow_mut().insert(key, v.id);
        v
    }

    fn unary(&self, a: usize, f: Unary<T>) -> Var<'_, T> {
        let x = self.value_of(a);
        let out = match f {
            Unary::Abs => x.map(|v| v.abs()),
            Unary::Square => x.map(|v| v * v),
            Unary::Sqrt => x.map(|v| v.sqrt()),
            Unary::Ln => x.map(|v| v.ln()),
            Unary::Exp => x.map(|v| v.exp()),
            Unary::Powf(p) => x.map(|v| v.powf(p)),
            Unary::Sigmoid => x.map(sigmoid),
            Unary::Relu => x.map(|v| v.max(T::zero())),
            Unary::LeakyRelu(s) => x.map(|v| if v > T::zero() { v } else { s * v }),
            Unary::Softplus => x.map(softplus),
            Unary::Clamp(lo, hi) => x.map(|v| v.max(lo).min(hi)),
        };
        self.push(out, Op::Unary(a, f), self.tracks(a))
    }

    fn binary(&self, a: usize, b: usize, op: Op<T>) -> Var<'_, T> {
        let (x, y) = (self.value_of(a), self.value_of(b));
        let out = match op {
            Op::Add(..) => x.zip_map(&y, |p, q| p + q),
            Op::Sub(..) => x.zip_map(&y, |p, q| p - q),
            Op::Mul(..) => x.zip_map(&y, |p, q| p * q),
            Op::Div(..) => x.zip_map(&y, |p, q| p / q),
            Op::Min(..) => x.zip_map(&y, |p, q| if p <= q { p } else { q }),
            _ => unreachable!("not a binary op"),
        };
        self.push(out, op, self.tracks(a) || self.tracks(b))
    }

    /// Reverse sweep from `root`, seeded with `seed` (ones when `None`).
    fn backward_from(&self, root: usize, seed: Option<Tensor<T>>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[root] = Some(seed.unwrap_or_else(|| Tensor::ones(nodes[root].value.shape())));
        for id in (0..=root).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            propagate(&nodes, id, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        Gradients { grads }
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(v: T) -> T {
    // log(1 + e^v) without overflow
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn propagate<T: Scalar>(nodes: &[Node<T>], id: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let wants = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| &*nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::Add(a, b) => {
            if wants(a) {
                accumulate(&mut grads[a], gy.clone());
            }
            if wants(b) {
                accumulate(&mut grads[b], gy.clone());
            }
        }
        &Op::Sub(a, b) => {
            if wants(a) {
                accumulate(&mut grads[a], gy.clone());
            }
            if wants(b) {
                accumulate(&mut grads[b], gy.map(|g| -g));
            }
        }
        &Op::Mul(a, b) => {
            if wants(a) {
                accumulate(&mut grads[a], gy.zip_map(val(b), |g, y| g * y));
            }
            if wants(b) {
                accumulate(&mut grads[b], gy.zip_map(val(a), |g, x| g * x));
            }
        }
        &Op::Div(a, b) => {
            let y = val(b);
            if wants(a) {
                accumulate(&mut grads[a], gy.zip_map(y, |g, q| g / q));
            }
            if wants(b) {
                let out = val(id);
                let t = gy.zip_map(out, |g, o| g * o);
                accumulate(&mut grads[b], t.zip_map(y, |go, q| -go / q));
            }
        }
        &Op::Min(a, b) => {
            let (xa, xb) = (val(a), val(b));
            if wants(a) {
                let g = Tensor::from_fn(gy.shape(), |i| {
                    if xa.data()[i] <= xb.data()[i] {
                        gy.data()[i]
                    } else {
                        T::zero()
                    }
                });
                accumulate(&mut grads[a], g);
            }
            if wants(b) {
                let g = Tensor::from_fn(gy.shape(), |i| {
                    if xa.data()[i] <= xb.data()[i] {
                        T::zero()
                    } else {
                        gy.data()[i]
                    }
                });
                accumulate(&mut grads[b], g);
            }
        }
        &Op::AddScalar(a) => accumulate(&mut grads[a], gy.clone()),
        &Op::MulScalar(a, c) => accumulate(&mut grads[a], gy.map(|g| g * c)),
        Op::Unary(a, f) => {
            let a = *a;
            let x = val(a);
            let y = val(id);
            let one = T::one();
            let g = match *f {
                Unary::Abs => gy.zip_map(x, |g, v| {
                    if v > T::zero() {
                        g
                    } else if v < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                }),
                Unary::Square => gy.zip_map(x, |g, v| g * (v + v)),
                Unary::Sqrt => gy.zip_map(y, |g, o| g / (o + o)),
                Unary::Ln => gy.zip_map(x, |g, v| g / v),
                Unary::Exp => gy.zip_map(y, |g, o| g * o),
                Unary::Powf(p) => {
                    if p == T::zero() {
                        Tensor::zeros(gy.shape())
                    } else {
                        gy.zip_map(x, |g, v| g * p * v.powf(p - one))
                    }
                }
                Unary::Sigmoid => gy.zip_map(y, |g, o| g * o * (one - o)),
                Unary::Relu => gy.zip_map(x, |g, v| if v > T::zero() { g } else { T::zero() }),
                Unary::LeakyRelu(s) => gy.zip_map(x, |g, v| if v > T::zero() { g } else { g * s }),
                Unary::Softplus => gy.zip_map(x, |g, v| g * sigmoid(v)),
                Unary::Clamp(lo, hi) => {
                    gy.zip_map(x, |g, v| if v >= lo && v <= hi { g } else { T::zero() })
                }
            };
            accumulate(&mut grads[a], g);
        }
        &Op::Sum(a) => {
            let g = gy.item();
            accumulate(&mut grads[a], Tensor::full(val(a).shape(), g));
        }
        &Op::Mean(a) => {
            let x = val(a);
            let g = gy.item() / T::of(x.len() as f64);
            accumulate(&mut grads[a], Tensor::full(x.shape(), g));
        }
        &Op::SumPerSample(a) => {
            let x = val(a);
            let per = x.len() / x.shape()[0];
            accumulate(&mut grads[a], Tensor::from_fn(x.shape(), |i| gy.data()[i / per]));
        }
        &Op::Reshape(a) => {
            accumulate(&mut grads[a], gy.clone().reshaped(val(a).shape()));
        }
        &Op::Conv2d { x, w, b, geom } => {
            let need_db = b.is_some_and(wants);
            let (dx, dw, db) =
                kernels::conv2d_backward(&geom, val(x), val(w), gy, wants(x), wants(w), need_db);
            if let Some(dx) = dx {
                accumulate(&mut grads[x], dx);
            }
            if let Some(dw) = dw {
                accumulate(&mut grads[w], dw);
            }
            if let (Some(b), Some(db)) = (b, db) {
                accumulate(&mut grads[b], db);
            }
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
            let (n, c, h, w) = gy.dims4();
            let plane = h * w;
            let m = T::of((n * plane) as f64);
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            let mut buf_g = Vec::with_capacity(n * plane);
            let mut buf_gx = Vec::with_capacity(n * plane);
            for ch in 0..c {
                buf_g.clear();
                buf_gx.clear();
                for s in 0..n {
                    let off = (s * c + ch) * plane;
                    for i in off..off + plane {
                        buf_g.push(gy.data()[i]);
                        buf_gx.push(gy.data()[i] * xhat.data()[i]);
                    }
                }
                sum_g[ch] = pairwise_sum(&buf_g);
                sum_gx[ch] = pairwise_sum(&buf_gx);
            }
            if wants(*gamma) {
                accumulate(&mut grads[*gamma], Tensor::from_vec(&[c], sum_gx.clone()));
            }
            if wants(*beta) {
                accumulate(&mut grads[*beta], Tensor::from_vec(&[c], sum_g.clone()));
            }
            if wants(*x) {
                let gam = val(*gamma);
                let dx = Tensor::from_fn(gy.shape(), |i| {
                    let ch = (i / plane) % c;
                    let k = gam.data()[ch] * inv_std[ch] / m;
                    k * (m * gy.data()[i] - sum_g[ch] - xhat.data()[i] * sum_gx[ch])
                });
                accumulate(&mut grads[*x], dx);
            }
        }
        &Op::ChannelAffine { x, scale, shift } => {
            let (n, c, h, w) = gy.dims4();
            let plane = h * w;
            let sc = val(scale);
            let xv = val(x);
            if wants(x) {
                accumulate(&mut grads[x], Tensor::from_fn(gy.shape(), |i| gy.data()[i] * sc.data()[(i / plane) % c]));
            }
            if wants(scale) || wants(shift) {
                let mut ds = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * plane;
                        let g = &gy.data()[off..off + plane];
                        db[ch] += pairwise_sum(g);
                        let prod: Vec<T> = g.iter().zip(&xv.data()[off..off + plane]).map(|(&a, &b)| a * b).collect();
                        ds[ch] += pairwise_sum(&prod);
                    }
                }
                if wants(scale) {
                    accumulate(&mut grads[scale], Tensor::from_vec(&[c], ds));
                }
                if wants(shift) {
                    accumulate(&mut grads[shift], Tensor::from_vec(&[c], db));
                }
            }
        }
        &Op::Linear { x, w, b } => {
            let xv = val(x);
            let wv = val(w);
            let (n, k) = (xv.shape()[0], xv.shape()[1]);
            let m = wv.shape()[0];
            if wants(x) {
                let mut dx = Tensor::zeros(xv.shape());
                T::gemm(n, m, k, T::one(), gy.data(), false, wv.data(), false, T::zero(), dx.data_mut());
                accumulate(&mut grads[x], dx);
            }
            if wants(w) {
                let mut dw = Tensor::zeros(wv.shape());
                T::gemm(m, n, k, T::one(), gy.data(), true, xv.data(), false, T::zero(), dw.data_mut());
                accumulate(&mut grads[w], dw);
            }
            if let Some(b) = b.filter(|&b| wants(b)) {
                let db = Tensor::from_fn(&[m], |j| {
                    let col: Vec<T> = (0..n).map(|i| gy.data()[i * m + j]).collect();
                    pairwise_sum(&col)
                });
                accumulate(&mut grads[b], db);
            }
        }
        &Op::Upsample2(a) => accumulate(&mut grads[a], kernels::upsample_nearest2_backward(gy)),
        &Op::AvgPool2(a) => {
            let (_, _, h, w) = val(a).dims4();
            accumulate(&mut grads[a], kernels::avg_pool2_backward(gy, h, w));
        }
        &Op::Concat(a, b) => {
            let (n, ca, h, w) = val(a).dims4();
            let cb = val(b).shape()[1];
            let plane = h * w;
            let ct = ca + cb;
            if wants(a) {
                let g = Tensor::from_fn(&[n, ca, h, w], |i| {
                    let s = i / (ca * plane);
                    gy.data()[s * ct * plane + i % (ca * plane)]
                });
                accumulate(&mut grads[a], g);
            }
            if wants(b) {
                let g = Tensor::from_fn(&[n, cb, h, w], |i| {
                    let s = i / (cb * plane);
                    gy.data()[s * ct * plane + ca * plane + i % (cb * plane)]
                });
                accumulate(&mut grads[b], g);
            }
        }
        &Op::SelectChannel(a, ch) => {
            let (n, c, h, w) = val(a).dims4();
            let plane = h * w;
            let mut g = Tensor::zeros(&[n, c, h, w]);
            for s in 0..n {
                let dst = (s * c + ch) * plane;
                g.data_mut()[dst..dst + plane].copy_from_slice(&gy.data()[s * plane..(s + 1) * plane]);
            }
            accumulate(&mut grads[a], g);
        }
        &Op::Softmax(a) => accumulate(&mut grads[a], kernels::channel_softmax_backward(val(id), gy)),
        Op::Filter { x, taps, axis } => {
            let (_, _, h, w) = val(*x).dims4();
            accumulate(&mut grads[*x], kernels::filter_valid_backward(gy, taps, *axis, h, w));
        }
    }
}

/// Result of a reverse sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the root with respect to `v`, or `None` when `v` does not
    /// influence the root through tracked nodes.
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradients for every entry of `set` bound (tracked) in `graph`, in entry order.
    pub fn for_params(&self, graph: &Graph<T>, set: &ParamSet<T>) -> Vec<Option<Tensor<T>>> {
        let bindings = graph.bindings.borrow();
        (0..set.len())
            .map(|i| {
                bindings
                    .get(&(set.uid(), i))
                    .and_then(|&node| self.grads[node].clone())
            })
            .collect()
    }
}

// Consuming arithmetic on graph nodes; operator traits would hide the shape checks.
#[allow(clippy::should_implement_trait)]
impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.tracks(self.id)
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.constant((*self.value()).clone())
    }

    pub fn backward(&self) -> Gradients<T> {
        assert_eq!(self.value().len(), 1, "backward() needs a scalar root; use backward_with");
        self.graph.backward_from(self.id, None)
    }

    pub fn backward_with(&self, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), &self.shape()[..], "seed shape mismatch");
        self.graph.backward_from(self.id, Some(seed))
    }

    fn same_graph(&self, other: &Var<'g, T>) {
        assert!(std::ptr::eq(self.graph, other.graph), "vars from different graphs");
    }

    fn check_shapes(&self, other: &Var<'g, T>, what: &str) {
        self.same_graph(other);
        let (a, b) = (self.shape(), other.shape());
        assert_eq!(a, b, "{what}: shape mismatch {a:?} vs {b:?}");
    }

    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        self.check_shapes(&other, "add");
        self.graph.binary(self.id, other.id, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        self.check_shapes(&other, "sub");
        self.graph.binary(self.id, other.id, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        self.check_shapes(&other, "mul");
        self.graph.binary(self.id, other.id, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'g, T>) -> Var<'g, T> {
        self.check_shapes(&other, "div");
        self.graph.binary(self.id, other.id, Op::Div(self.id, other.id))
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn minimum(self, other: Var<'g, T>) -> Var<'g, T> {
        self.check_shapes(&other, "minimum");
        self.graph.binary(self.id, other.id, Op::Min(self.id, other.id))
    }

    pub fn add_scalar(self, c: T) -> Var<'g, T> {
        let out = self.value().map(|v| v + c);
        self.graph.push(out, Op::AddScalar(self.id), self.requires_grad())
    }

    pub fn scale(self, c: T) -> Var<'g, T> {
        let out = self.value().map(|v| v * c);
        self.graph.push(out, Op::MulScalar(self.id, c), self.requires_grad())
    }

    pub fn neg(self) -> Var<'g, T> {
        self.scale(-T::one())
    }

    /// `1 - self`
    pub fn one_minus(self) -> Var<'g, T> {
        self.neg().add_scalar(T::one())
    }

    pub fn abs(self) -> Var<'g, T> {
        self.graph.unary(self.id, Unary::Abs)
    }

    pub fn square(self) -> Var<'g, T> {
        self.graph.unary(self.id, Unary::Square)
    }

    pub fn sqrt(self) -> Var<'g, T> {
        self.graph.unary(self.id, Unary::Sqrt)
    }

    pub fn ln(self) -> Var<'g, T> {
        self.graph.unary(self.id, Unary::Ln)
    }

    pub fn exp(self) -> Var<'g, T> {
        self.graph.unary(self.id, Unary::Exp)
    }

    pub fn powf(self, p: T) -> Var<'g, T> {
        self.graph.unary(self.id, Unary::Powf(p))
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.graph.unary(self.id, Unary::Sigmoid)
    }

    pub fn relu(self) -> Var<'g, T> {
        self.graph.unary(self.id, Unary::Relu)
    }

    pub fn leaky_relu(self, slope: T) -> Var<'g, T> {
        self.graph.unary(self.id, Unary::LeakyRelu(slope))
    }

    /// `ln(1 + e^x)`
    pub fn softplus(self) -> Var<'g, T> {
        self.graph.unary(self.id, Unary::Softplus)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(self, lo: T, hi: T) -> Var<'g, T> {
        self.graph.unary(self.id, Unary::Clamp(lo, hi))
    }

    pub fn sum(self) -> Var<'g, T> {
        let out = Tensor::scalar(self.value().sum());
        self.graph.push(out, Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(self) -> Var<'g, T> {
        let out = Tensor::scalar(self.value().mean());
        self.graph.push(out, Op::Mean(self.id), self.requires_grad())
    }

    /// Reduces every axis but the leading one: `(n, ...) -> (n)`.
    pub fn sum_per_sample(self) -> Var<'g, T> {
        let x = self.value();
        let n = x.shape()[0];
        let out = Tensor::from_fn(&[n], |s| pairwise_sum(x.sample(s)));
        self.graph.push(out, Op::SumPerSample(self.id), self.requires_grad())
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let out = (*self.value()).clone().reshaped(shape);
        self.graph.push(out, Op::Reshape(self.id), self.requires_grad())
    }

    /// `(n, c, h, w) -> (n, c*h*w)`
    pub fn flatten(self) -> Var<'g, T> {
        let s = self.shape();
        self.reshape(&[s[0], s[1..].iter().product()])
    }

    /// 2-D convolution; `weight` is `(out, in, k, k)`, `bias` is `(out)`.
    pub fn conv2d(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, stride: usize, pad: usize) -> Var<'g, T> {
        self.same_graph(&weight);
        let x = self.value();
        let w = weight.value();
        let (_, c, h, wd) = x.dims4();
        let (oc, ic, k, k2) = w.dims4();
        assert_eq!(k, k2, "conv2d: square kernels only");
        assert_eq!(c, ic, "conv2d: input has {c} channels, weight expects {ic}");
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d: kernel larger than padded input");
        let geom = ConvGeometry { in_ch: c, out_ch: oc, kernel: k, stride, pad, in_h: h, in_w: wd };
        let bval = bias.map(|b| b.value());
        if let Some(b) = &bval {
            assert_eq!(b.shape(), &[oc], "conv2d: bias shape");
        }
        let out = kernels::conv2d_forward(&geom, &x, &w, bval.as_deref());
        let rg = self.requires_grad() || weight.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        self.graph.push(out, Op::Conv2d { x: self.id, w: weight.id, b: bias.map(|b| b.id), geom }, rg)
    }

    /// Batch normalization with batch statistics. Returns the output and the
    /// `(mean, biased variance)` used for normalization.
    pub fn batch_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: T) -> (Var<'g, T>, Vec<T>, Vec<T>) {
        let x = self.value();
        let (_, c, h, w) = x.dims4();
        let plane = h * w;
        let (mean, var) = kernels::channel_moments(&x);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xhat = Tensor::from_fn(x.shape(), |i| {
            let ch = (i / plane) % c;
            (x.data()[i] - mean[ch]) * inv_std[ch]
        });
        let (g, b) = (gamma.value(), beta.value());
        assert_eq!(g.shape(), &[c], "batch_norm: gamma shape");
        let out = Tensor::from_fn(x.shape(), |i| {
            let ch = (i / plane) % c;
            g.data()[ch] * xhat.data()[i] + b.data()[ch]
        });
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let op = Op::BatchNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat: Rc::new(xhat), inv_std };
        (self.graph.push(out, op, rg), mean, var)
    }

    /// `y[n,c,h,w] = scale[c] * x[n,c,h,w] + shift[c]`
    pub fn channel_affine(self, scale: Var<'g, T>, shift: Var<'g, T>) -> Var<'g, T> {
        let x = self.value();
        let (_, c, h, w) = x.dims4();
        let plane = h * w;
        let (s, b) = (scale.value(), shift.value());
        assert_eq!(s.shape(), &[c], "channel_affine: scale shape");
        assert_eq!(b.shape(), &[c], "channel_affine: shift shape");
        let out = Tensor::from_fn(x.shape(), |i| {
            let ch = (i / plane) % c;
            s.data()[ch] * x.data()[i] + b.data()[ch]
        });
        let rg = self.requires_grad() || scale.requires_grad() || shift.requires_grad();
        self.graph.push(out, Op::ChannelAffine { x: self.id, scale: scale.id, shift: shift.id }, rg)
    }

    /// `(n, k) x (m, k)^T + b -> (n, m)`
    pub fn linear(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>) -> Var<'g, T> {
        let x = self.value();
        let w = weight.value();
        let (n, k) = (x.shape()[0], x.shape()[1]);
        let m = w.shape()[0];
        assert_eq!(w.shape()[1], k, "linear: input width {k}, weight expects {}", w.shape()[1]);
        let mut out = vec![T::zero(); n * m];
        let beta = if let Some(b) = bias {
            let bv = b.value();
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bv.data());
            }
            T::one()
        } else {
            T::zero()
        };
        T::gemm(n, k, m, T::one(), x.data(), false, w.data(), true, beta, &mut out);
        let rg = self.requires_grad() || weight.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        self.graph.push(
            Tensor::from_vec(&[n, m], out),
            Op::Linear { x: self.id, w: weight.id, b: bias.map(|b| b.id) },
            rg,
        )
    }

    pub fn upsample2(self) -> Var<'g, T> {
        let out = kernels::upsample_nearest2(&self.value());
        self.graph.push(out, Op::Upsample2(self.id), self.requires_grad())
    }

    pub fn avg_pool2(self) -> Var<'g, T> {
        let x = self.value();
        let (_, _, h, w) = x.dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2: odd spatial size {h}x{w}");
        let out = kernels::avg_pool2(&x);
        self.graph.push(out, Op::AvgPool2(self.id), self.requires_grad())
    }

    /// Channel-wise concatenation of two `NCHW` tensors.
    pub fn concat_channels(self, other: Var<'g, T>) -> Var<'g, T> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        let (n, ca, h, w) = a.dims4();
        let (nb, cb, hb, wb) = b.dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat_channels: batch/spatial mismatch");
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for s in 0..n {
            out.extend_from_slice(a.sample(s));
            out.extend_from_slice(b.sample(s));
        }
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(Tensor::from_vec(&[n, ca + cb, h, w], out), Op::Concat(self.id, other.id), rg)
    }

    /// `(n, c, h, w) -> (n, 1, h, w)` picking channel `ch`.
    pub fn select_channel(self, ch: usize) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert!(ch < c, "select_channel: channel {ch} of {c}");
        let plane = h * w;
        let mut out = Vec::with_capacity(n * plane);
        for s in 0..n {
            let off = (s * c + ch) * plane;
            out.extend_from_slice(&x.data()[off..off + plane]);
        }
        self.graph.push(Tensor::from_vec(&[n, 1, h, w], out), Op::SelectChannel(self.id, ch), self.requires_grad())
    }

    /// Softmax across the channel axis of an `NCHW` tensor.
    pub fn channel_softmax(self) -> Var<'g, T> {
        let out = kernels::channel_softmax(&self.value());
        self.graph.push(out, Op::Softmax(self.id), self.requires_grad())
    }

    /// Valid-mode 1-D correlation along `axis`, applied per channel.
    pub fn filter(self, taps: &[T], axis: Axis) -> Var<'g, T> {
        let out = kernels::filter_valid(&self.value(), taps, axis);
        self.graph.push(out, Op::Filter { x: self.id, taps: taps.to_vec(), axis }, self.requires_grad())
    }
}
