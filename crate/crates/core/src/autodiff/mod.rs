//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every op evaluates eagerly and appends a node, so
//! node order is a topological order and the graph is acyclic by construction.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients,
//! summing contributions from every consumer of a node.

mod kernels;
pub mod optim;

use std::collections::BTreeMap;

pub use kernels::ConvGeometry;
pub(crate) use kernels::{conv2d_forward, linear_forward, log_softmax_rows};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Variable,
    Param(String),
    Conv2d { x: Var, w: Var, b: Option<Var>, geo: ConvGeometry },
    Upsample2(Var),
    AvgPool2d(Var, usize),
    Linear { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    Abs(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Softplus(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    ClampMin(Var, f64),
    LogSoftmax(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SquaredError(Var, Var),
    CrossEntropy(Var, Vec<usize>),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// The tape. Values are immutable once recorded.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    macs: u64,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient with respect to a node, if it lies on a path to the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Shape(format!("{op}: {detail}"))
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

    /// Multiply-accumulates spent in conv/linear ops so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        t.ensure_finite("graph input")?;
        Ok(self.push(Op::Constant, t, false))
    }

    /// Unnamed leaf that receives a gradient (used for input sensitivities).
    pub fn variable(&mut self, t: Tensor) -> Result<Var> {
        t.ensure_finite("graph variable")?;
        Ok(self.push(Op::Variable, t, true))
    }

    /// Named trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: &str, t: Tensor) -> Result<Var> {
        t.ensure_finite(name)?;
        Ok(self.push(Op::Param(name.to_string()), t, true))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let geo = ConvGeometry::new(self.value(x).shape(), self.value(w).shape(), stride, pad, groups)
            .map_err(|e| shape_err("conv2d", e.to_string()))?;
        if let Some(b) = b {
            if self.value(b).shape() != [geo.out_channels] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias {:?} for {} output channels", self.value(b).shape(), geo.out_channels),
                ));
            }
        }
        let out = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geo);
        self.macs += geo.macs();
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.grad_of(&deps);
        Ok(self.push(Op::Conv2d { x, w, b, geo }, out, ng))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        if self.value(x).rank() != 4 {
            return Err(shape_err("upsample2", format!("expects 4-d input, got {:?}", self.value(x).shape())));
        }
        let out = kernels::upsample2_forward(self.value(x));
        let ng = self.grad_of(&[x]);
        Ok(self.push(Op::Upsample2(x), out, ng))
    }

    pub fn avgpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.value(x).shape();
        if s.len() != 4 || k == 0 || s[2] % k != 0 || s[3] % k != 0 {
            return Err(shape_err("avgpool2d", format!("kernel {k} does not tile input {s:?}")));
        }
        let out = kernels::avgpool_forward(self.value(x), k);
        let ng = self.grad_of(&[x]);
        Ok(self.push(Op::AvgPool2d(x, k), out, ng))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err("linear", format!("input {xs:?} vs weight {ws:?}")));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [ws[0]] {
                return Err(shape_err("linear", format!("bias {:?} for {} outputs", self.value(b).shape(), ws[0])));
            }
        }
        self.macs += (xs[0] * ws[0] * ws[1]) as u64;
        let out = linear_forward(self.value(x), self.value(w), b.map(|b| self.value(b)));
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.grad_of(&deps);
        Ok(self.push(Op::Linear { x, w, b }, out, ng))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(x).map(f);
        let ng = self.grad_of(&[x]);
        self.push(op, out, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::NonFinite("log of non-positive value".into()));
        }
        Ok(self.unary(x, Op::Log(x), f64::ln))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    /// Logistic sigmoid, expressed through `tanh` so it stays in the op set.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let h = self.scale(x, 0.5);
        let t = self.tanh(h);
        let s = self.scale(t, 0.5);
        self.offset(s, 0.5)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, Op::Scale(x, k), |v| v * k)
    }

    pub fn offset(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, Op::Offset(x), |v| v + k)
    }

    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, Op::ClampMin(x, floor), |v| v.max(floor))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = if ta.shape() == tb.shape() {
            ta.zip_map(tb, f)?
        } else {
            let shape = kernels::broadcast_shape(ta.shape(), tb.shape())
                .ok_or_else(|| shape_err(name, format!("cannot broadcast {:?} with {:?}", ta.shape(), tb.shape())))?;
            let ia = kernels::broadcast_indices(&shape, ta.shape());
            let ib = kernels::broadcast_indices(&shape, tb.shape());
            let data = ia.iter().zip(&ib).map(|(&i, &j)| f(ta.data()[i], tb.data()[j])).collect();
            Tensor::from_parts(shape, data)
        };
        let ng = self.grad_of(&[a, b]);
        Ok(self.push(op, out, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&v| v == 0.0) {
            return Err(Error::NonFinite("division by zero".into()));
        }
        self.binary(a, b, "div", Op::Div(a, b), |x, y| x / y)
    }

    /// Log-softmax over the last dimension of `[N, C]` logits.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        if self.value(x).rank() != 2 {
            return Err(shape_err("log_softmax", format!("expects [N, C], got {:?}", self.value(x).shape())));
        }
        let out = log_softmax_rows(self.value(x));
        let ng = self.grad_of(&[x]);
        Ok(self.push(Op::LogSoftmax(x), out, ng))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let l = self.log_softmax(x)?;
        Ok(self.exp(l))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self
            .value(x)
            .reshape(shape.to_vec())
            .map_err(|e| shape_err("reshape", e.to_string()))?;
        let ng = self.grad_of(&[x]);
        Ok(self.push(Op::Reshape(x), out, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.grad_of(&[x]);
        self.push(Op::Sum(x), out, ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        let ng = self.grad_of(&[x]);
        self.push(Op::Mean(x), out, ng)
    }

    /// `Σ (a − b)²` over all elements.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("squared_error", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let s = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let ng = self.grad_of(&[a, b]);
        Ok(self.push(Op::SquaredError(a, b), Tensor::scalar(s), ng))
    }

    /// Mean cross-entropy of `[N, C]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.value(logits).shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err("cross_entropy", format!("logits {s:?} for {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= s[1]) {
            return Err(shape_err("cross_entropy", format!("label {bad} outside {} classes", s[1])));
        }
        let lp = log_softmax_rows(self.value(logits));
        let c = s[1];
        let loss = -labels.iter().enumerate().map(|(i, &y)| lp.data()[i * c + y]).sum::<f64>() / labels.len() as f64;
        let ng = self.grad_of(&[logits]);
        Ok(self.push(Op::CrossEntropy(logits, labels.to_vec()), Tensor::scalar(loss), ng))
    }

    /// Batch-mean `KL(softmax(p/τ) ‖ softmax(q/τ))` for `[N, C]` logits.
    pub fn kl_divergence(&mut self, p_logits: Var, q_logits: Var, tau: f64) -> Result<Var> {
        let n = self.value(p_logits).shape()[0] as f64;
        let ps = self.scale(p_logits, 1.0 / tau);
        let qs = self.scale(q_logits, 1.0 / tau);
        let lp = self.log_softmax(ps)?;
        let lq = self.log_softmax(qs)?;
        let p = self.exp(lp);
        let diff = self.sub(lp, lq)?;
        let terms = self.mul(p, diff)?;
        let total = self.sum(terms);
        Ok(self.scale(total, 1.0 / n))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        lv.ensure_finite("loss")?;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));
        let mut params: BTreeMap<String, Tensor> = BTreeMap::new();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let mut contributions: Vec<(Var, Tensor)> = Vec::new();
            let val = &node.value;
            match &node.op {
                Op::Constant | Op::Variable => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Param(name) => {
                    match params.get_mut(name) {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += b;
                            }
                        }
                        None => {
                            params.insert(name.clone(), g.clone());
                        }
                    }
                    grads[id] = Some(g);
                    continue;
                }
                Op::Conv2d { x, w, b, geo } => {
                    let need_dx = self.nodes[x.0].needs_grad;
                    let (dx, dw, db) = kernels::conv2d_backward(self.value(*x), self.value(*w), &g, geo, need_dx);
                    if let Some(dx) = dx {
                        contributions.push((*x, dx));
                    }
                    contributions.push((*w, dw));
                    if let Some(b) = b {
                        contributions.push((*b, db));
                    }
                }
                Op::Upsample2(x) => {
                    contributions.push((*x, kernels::upsample2_backward(&g, self.value(*x).shape())));
                }
                Op::AvgPool2d(x, k) => {
                    contributions.push((*x, kernels::avgpool_backward(&g, self.value(*x).shape(), *k)));
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = kernels::linear_backward(self.value(*x), self.value(*w), &g);
                    contributions.push((*x, dx));
                    contributions.push((*w, dw));
                    if let Some(b) = b {
                        contributions.push((*b, db));
                    }
                }
                Op::Relu(x) => {
                    let d = g.zip_map(self.value(*x), |gi, xi| if xi > 0.0 { gi } else { 0.0 })?;
                    contributions.push((*x, d));
                }
                Op::Abs(x) => {
                    let d = g.zip_map(self.value(*x), |gi, xi| gi * sign(xi))?;
                    contributions.push((*x, d));
                }
                Op::Exp(x) => contributions.push((*x, g.zip_map(val, |gi, yi| gi * yi)?)),
                Op::Log(x) => contributions.push((*x, g.zip_map(self.value(*x), |gi, xi| gi / xi)?)),
                Op::Tanh(x) => contributions.push((*x, g.zip_map(val, |gi, yi| gi * (1.0 - yi * yi))?)),
                Op::Softplus(x) => {
                    let d = g.zip_map(self.value(*x), |gi, xi| gi * logistic(xi))?;
                    contributions.push((*x, d));
                }
                Op::Scale(x, k) => contributions.push((*x, g.map(|gi| gi * k))),
                Op::Offset(x) => contributions.push((*x, g)),
                Op::ClampMin(x, floor) => {
                    let d = g.zip_map(self.value(*x), |gi, xi| if xi > *floor { gi } else { 0.0 })?;
                    contributions.push((*x, d));
                }
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ia = kernels::broadcast_indices(g.shape(), ta.shape());
                    let ib = kernels::broadcast_indices(g.shape(), tb.shape());
                    let (mut da, mut db) = (vec![0.0; ta.len()], vec![0.0; tb.len()]);
                    for (k, &gk) in g.data().iter().enumerate() {
                        let (x, y) = (ta.data()[ia[k]], tb.data()[ib[k]]);
                        let (ga, gb) = match &node.op {
                            Op::Add(..) => (gk, gk),
                            Op::Sub(..) => (gk, -gk),
                            Op::Mul(..) => (gk * y, gk * x),
                            _ => (gk / y, -gk * x / (y * y)),
                        };
                        da[ia[k]] += ga;
                        db[ib[k]] += gb;
                    }
                    contributions.push((*a, Tensor::from_parts(ta.shape().to_vec(), da)));
                    contributions.push((*b, Tensor::from_parts(tb.shape().to_vec(), db)));
                }
                Op::LogSoftmax(x) => {
                    let (n, c) = (val.shape()[0], val.shape()[1]);
                    let mut d = vec![0.0; n * c];
                    for i in 0..n {
                        let gs: f64 = g.data()[i * c..(i + 1) * c].iter().sum();
                        for j in 0..c {
                            d[i * c + j] = g.data()[i * c + j] - val.data()[i * c + j].exp() * gs;
                        }
                    }
                    contributions.push((*x, Tensor::from_parts(vec![n, c], d)));
                }
                Op::Reshape(x) => {
                    let d = g.reshape(self.value(*x).shape().to_vec())?;
                    contributions.push((*x, d));
                }
                Op::Sum(x) => {
                    let s = g.data()[0];
                    contributions.push((*x, Tensor::full(self.value(*x).shape().to_vec(), s)));
                }
                Op::Mean(x) => {
                    let t = self.value(*x);
                    let s = g.data()[0] / t.len() as f64;
                    contributions.push((*x, Tensor::full(t.shape().to_vec(), s)));
                }
                Op::SquaredError(a, b) => {
                    let s = 2.0 * g.data()[0];
                    let d = self.value(*a).zip_map(self.value(*b), |x, y| s * (x - y))?;
                    contributions.push((*b, d.map(|v| -v)));
                    contributions.push((*a, d));
                }
                Op::CrossEntropy(x, labels) => {
                    let t = self.value(*x);
                    let (n, c) = (t.shape()[0], t.shape()[1]);
                    let lp = log_softmax_rows(t);
                    let s = g.data()[0] / n as f64;
                    let mut d: Vec<f64> = lp.data().iter().map(|l| l.exp() * s).collect();
                    for (i, &y) in labels.iter().enumerate() {
                        d[i * c + y] -= s;
                    }
                    contributions.push((*x, Tensor::from_parts(vec![n, c], d)));
                }
            }
            for (v, d) in contributions {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(d.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(d),
                }
            }
        }
        for (name, g) in &params {
            g.ensure_finite(&format!("gradient of {name}"))?;
        }
        Ok(Gradients { by_node: grads, params })
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive `y`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn logistic(x: f64) -> f64 {
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

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_linear() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[1.0, 2.0])).unwrap();
        let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let b = g.constant(t(&[2], &[0.0, 0.0])).unwrap();
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 3.0])).unwrap();
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn scalar_kernel_conv_scales_input() {
        let data: Vec<f64> = (1..=9).map(f64::from).collect();
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 3, 3], &data)).unwrap();
        let w = g.constant(t(&[1, 1, 1, 1], &[2.0])).unwrap();
        let y = g.conv2d(x, w, None, 1, 0, 1).unwrap();
        let expect: Vec<f64> = data.iter().map(|v| v * 2.0).collect();
        assert_eq!(g.value(y).data(), expect.as_slice());
    }

    #[test]
    fn conv_shape_error_names_op() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 3, 4, 4])).unwrap();
        let w = g.constant(Tensor::zeros(vec![2, 2, 3, 3])).unwrap();
        let err = g.conv2d(x, w, None, 1, 1, 1).unwrap_err().to_string();
        assert!(err.contains("conv2d"), "{err}");
        assert!(err.contains("[1, 3, 4, 4]"), "{err}");
    }

    #[test]
    fn sum_gives_all_ones() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::full(vec![2, 3], 0.7)).unwrap();
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &Tensor::ones(vec![2, 3]));
    }

    #[test]
    fn half_squared_norm_gradient() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[3.0, 4.0])).unwrap();
        let zero = g.constant(Tensor::zeros(vec![2])).unwrap();
        let se = g.squared_error(x, zero).unwrap();
        let loss = g.scale(se, 0.5);
        assert_eq!(g.value(loss).data()[0], 12.5);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(vec![2])).unwrap();
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn diamond_fan_out_sums_paths() {
        // loss = sum(x*x + 3x) → d/dx = 2x + 3
        let mut g = Graph::new();
        let x = g.variable(t(&[3], &[1.0, -2.0, 0.5])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let lin = g.scale(x, 3.0);
        let y = g.add(sq, lin).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[5.0, -1.0, 4.0]);
    }

    #[test]
    fn shared_param_accumulates() {
        let mut g = Graph::new();
        let a = g.param("w", t(&[1], &[2.0])).unwrap();
        let b = g.param("w", t(&[1], &[2.0])).unwrap();
        let y = g.mul(a, b).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.params()["w"].data(), &[4.0]);
    }

    #[test]
    fn rejects_non_finite_input() {
        let mut g = Graph::new();
        assert!(g.constant(t(&[1], &[f64::NAN])).is_err());
    }
}
