//! Reverse-mode differentiation by operation recording.
//!
//! Every operation appends a node holding its output value and whatever the
//! backward rule needs. [`Tape::backward`] walks the nodes in exact reverse
//! execution order and accumulates gradients in that fixed order, so repeated
//! runs are bitwise reproducible.

use std::sync::Arc;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom, MatmulPlan};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Gelu(Var),
    Abs(Var),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        plan: MatmulPlan,
    },
    Linear {
        x: Var,
        w: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Pad {
        x: Var,
        axis: usize,
        before: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Upsample {
        x: Var,
        fh: usize,
        fw: usize,
    },
    AvgPool {
        x: Var,
        fh: usize,
        fw: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    DepthwiseXcorr {
        x: Var,
        z: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    BceWithLogits {
        logits: Var,
        targets: Tensor<T>,
        weights: Tensor<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Minimum(..) => "minimum",
            Op::Maximum(..) => "maximum",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Gelu(..) => "gelu",
            Op::Abs(..) => "abs",
            Op::MatMul { .. } => "matmul",
            Op::Linear { .. } => "linear",
            Op::Softmax { .. } => "softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Narrow { .. } => "narrow",
            Op::Pad { .. } => "pad",
            Op::Concat { .. } => "concat",
            Op::Upsample { .. } => "upsample",
            Op::AvgPool { .. } => "avg_pool",
            Op::Conv2d { .. } => "conv2d",
            Op::DepthwiseXcorr { .. } => "depthwise_xcorr",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }
}

/// Names of every recordable operation, for fault-injection validation.
pub const OP_NAMES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "minimum",
    "maximum",
    "add_bias",
    "scale",
    "add_scalar",
    "relu",
    "sigmoid",
    "gelu",
    "abs",
    "matmul",
    "linear",
    "softmax",
    "sum",
    "mean",
    "reshape",
    "permute",
    "narrow",
    "pad",
    "concat",
    "upsample",
    "avg_pool",
    "conv2d",
    "depthwise_xcorr",
    "layer_norm",
    "bce_with_logits",
];

#[derive(Debug)]
struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Single-writer operation record.
#[derive(Debug)]
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    macs: u64,
    fault: Option<String>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            macs: 0,
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations executed by matmul, linear and conv2d so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Test fixture: scales the backward contribution of every op named `op` by 1.5.
    pub fn inject_fault(&mut self, op: Option<&str>) {
        self.fault = op.map(str::to_owned);
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let g = t.requires_grad();
        self.push(t, Op::Leaf, g)
    }

    pub fn leaf_arc(&mut self, t: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Same value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value_arc(v);
        self.leaf_arc(value, false)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        make: impl FnOnce(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), op, f)?;
        let g = self.ng(&[a, b]);
        Ok(self.push(out, make(a, b), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "minimum", |x, y| if x <= y { x } else { y }, Op::Minimum)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "maximum", |x, y| if x >= y { x } else { y }, Op::Maximum)
    }

    /// `x[..., C] + b[C]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.value(x), self.value(b));
        let c = *xs.shape().last().unwrap_or(&0);
        if bs.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: xs.shape().to_vec(),
                rhs: bs.shape().to_vec(),
            });
        }
        let mut out = xs.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bb) in row.iter_mut().zip(bs.data()) {
                *o += bb;
            }
        }
        let g = self.ng(&[x, b]);
        Ok(self.push(out.with_grad(false), Op::AddBias(x, b), g))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let out = self.value(x).map(|v| v * c);
        let g = self.ng(&[x]);
        self.push(out, Op::Scale(x, c), g)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let out = self.value(x).map(|v| v + c);
        let g = self.ng(&[x]);
        self.push(out, Op::AddScalar(x), g)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let g = self.ng(&[x]);
        self.push(out, Op::Relu(x), g)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let g = self.ng(&[x]);
        self.push(out, Op::Sigmoid(x), g)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::of(gelu_parts(v.as_f64()).0));
        let g = self.ng(&[x]);
        self.push(out, Op::Gelu(x), g)
    }

    /// `|x|`; the subgradient at 0 is 0.
    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.abs());
        let g = self.ng(&[x]);
        self.push(out, Op::Abs(x), g)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let plan = kernels::matmul_plan(self.shape(a), self.shape(b), trans_b)?;
        let out = kernels::matmul_with_plan(&plan, self.value(a), self.value(b), trans_b);
        self.macs += (plan.a_offsets.len() * plan.m * plan.k * plan.n) as u64;
        let g = self.ng(&[a, b]);
        Ok(self.push(
            out,
            Op::MatMul {
                a,
                b,
                trans_b,
                plan,
            },
            g,
        ))
    }

    /// Batched `a[..., M, K] · b[..., K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Batched `a[..., M, K] · b[..., N, K]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (rows, cin, cout) = kernels::linear_dims(self.shape(x), self.shape(w))?;
        let out = kernels::linear(self.value(x), self.value(w))?;
        self.macs += (rows * cin * cout) as u64;
        let g = self.ng(&[x, w]);
        Ok(self.push(out, Op::Linear { x, w }, g))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = kernels::softmax(self.value(x), axis)?;
        let g = self.ng(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, g))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let g = self.ng(&[x]);
        self.push(out, Op::Sum(x), g)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / T::of(v.numel() as f64));
        let g = self.ng(&[x]);
        self.push(out, Op::Mean(x), g)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?.with_grad(false);
        let g = self.ng(&[x]);
        Ok(self.push(out, Op::Reshape(x), g))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = kernels::permute(self.value(x), perm)?;
        let g = self.ng(&[x]);
        Ok(self.push(
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            g,
        ))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = kernels::narrow(self.value(x), axis, start, len)?;
        let g = self.ng(&[x]);
        Ok(self.push(out, Op::Narrow { x, axis, start }, g))
    }

    pub fn pad(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let out = kernels::pad(self.value(x), axis, before, after)?;
        let g = self.ng(&[x]);
        Ok(self.push(out, Op::Pad { x, axis, before }, g))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let out = kernels::concat(&vals, axis)?;
        let g = self.ng(xs);
        Ok(self.push(
            out,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            g,
        ))
    }

    pub fn upsample(&mut self, x: Var, fh: usize, fw: usize) -> Result<Var> {
        let out = kernels::upsample(self.value(x), fh, fw)?;
        let g = self.ng(&[x]);
        Ok(self.push(out, Op::Upsample { x, fh, fw }, g))
    }

    pub fn avg_pool(&mut self, x: Var, fh: usize, fw: usize) -> Result<Var> {
        let out = kernels::avg_pool(self.value(x), fh, fw)?;
        let g = self.ng(&[x]);
        Ok(self.push(out, Op::AvgPool { x, fh, fw }, g))
    }

    /// Integer-ratio resampling of `[B, H, W, C]` (nearest up, average down).
    pub fn resample(&mut self, x: Var, target: (usize, usize)) -> Result<Var> {
        let [_, h, w, _] = kernels::expect_rank4("resample", self.value(x))?;
        let (uh, dh) = kernels::resample_factors(h, target.0)?;
        let (uw, dw) = kernels::resample_factors(w, target.1)?;
        let mut y = x;
        if uh > 1 || uw > 1 {
            y = self.upsample(y, uh, uw)?;
        }
        if dh > 1 || dw > 1 {
            y = self.avg_pool(y, dh, dw)?;
        }
        Ok(y)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = kernels::conv_geom(self.shape(x), self.shape(w), stride, pad)?;
        let out = kernels::conv2d(self.value(x), self.value(w), stride, pad)?;
        self.macs += (geom.b * geom.ho * geom.wo * geom.kh * geom.kw * geom.cin * geom.cout) as u64;
        let g = self.ng(&[x, w]);
        Ok(self.push(out, Op::Conv2d { x, w, geom }, g))
    }

    pub fn depthwise_xcorr(&mut self, x: Var, z: Var) -> Result<Var> {
        let out = kernels::depthwise_xcorr(self.value(x), self.value(z))?;
        let g = self.ng(&[x, z]);
        Ok(self.push(out, Op::DepthwiseXcorr { x, z }, g))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, xhat, rstd) = kernels::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let g = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            g,
        ))
    }

    /// `Σ_j w_j · (softplus(x_j) − y_j·x_j)`: weighted binary cross-entropy on logits,
    /// evaluated in the overflow-free form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor<T>, weights: Tensor<T>) -> Result<Var> {
        let x = self.value(logits);
        x.expect_same_shape(&targets, "bce_with_logits")?;
        x.expect_same_shape(&weights, "bce_with_logits")?;
        let mut total = T::zero();
        for ((&xv, &yv), &wv) in x.data().iter().zip(targets.data()).zip(weights.data()) {
            let softplus = xv.max(T::zero()) + (-xv.abs()).exp().ln_1p();
            total += wv * (softplus - yv * xv);
        }
        let g = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::BceWithLogits {
                logits,
                targets,
                weights,
            },
            g,
        ))
    }

    /// Gradients of the rank-0 `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.rank() != 0 {
            return Err(TensorError::contract(
                "backward",
                format!("loss must be a 0-dim tensor, got shape {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !root.needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            if self.fault.as_deref() == Some(node.op.name()) {
                g.data_mut().iter_mut().for_each(|v| *v *= T::of(1.5));
            }
            self.backward_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn accumulate_data(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
        let shape = self.shape(v).to_vec();
        self.accumulate(grads, v, Tensor::from_parts(shape, data));
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, "mul", |x, y| x * y)?);
                }
                if self.needs_grad(*b) {
                    self.accumulate(grads, *b, g.zip_map(av, "mul", |x, y| x * y)?);
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, "div", |x, y| x / y)?);
                }
                if self.needs_grad(*b) {
                    let data = gd
                        .iter()
                        .zip(av.data())
                        .zip(bv.data())
                        .map(|((&gg, &x), &y)| -gg * x / (y * y))
                        .collect();
                    self.accumulate_data(grads, *b, data);
                }
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let is_min = matches!(node.op, Op::Minimum(..));
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = vec![T::zero(); gd.len()];
                let mut gb = vec![T::zero(); gd.len()];
                for i in 0..gd.len() {
                    let pick_a = if is_min {
                        av.data()[i] <= bv.data()[i]
                    } else {
                        av.data()[i] >= bv.data()[i]
                    };
                    if pick_a {
                        ga[i] = gd[i];
                    } else {
                        gb[i] = gd[i];
                    }
                }
                self.accumulate_data(grads, *a, ga);
                self.accumulate_data(grads, *b, gb);
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs_grad(*b) {
                    let c = self.shape(*b)[0];
                    let mut gb = vec![T::zero(); c];
                    for row in gd.chunks(c) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate_data(grads, *b, gb);
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::Relu(x) => {
                let data = gd
                    .iter()
                    .zip(out.data())
                    .map(|(&gg, &y)| if y > T::zero() { gg } else { T::zero() })
                    .collect();
                self.accumulate_data(grads, *x, data);
            }
            Op::Sigmoid(x) => {
                let data = gd
                    .iter()
                    .zip(out.data())
                    .map(|(&gg, &y)| gg * y * (T::one() - y))
                    .collect();
                self.accumulate_data(grads, *x, data);
            }
            Op::Gelu(x) => {
                let data = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gg, &v)| gg * T::of(gelu_parts(v.as_f64()).1))
                    .collect();
                self.accumulate_data(grads, *x, data);
            }
            Op::Abs(x) => {
                let data = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gg, &v)| {
                        if v > T::zero() {
                            gg
                        } else if v < T::zero() {
                            -gg
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate_data(grads, *x, data);
            }
            Op::MatMul { a, b, trans_b, plan } => {
                let (m, k, n) = (plan.m, plan.k, plan.n);
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a) {
                    let mut ga = vec![T::zero(); av.numel()];
                    for (i, (&oa, &ob)) in plan.a_offsets.iter().zip(&plan.b_offsets).enumerate() {
                        // dA = dC · Bᵀ
                        T::gemm(
                            m,
                            n,
                            k,
                            &gd[i * m * n..(i + 1) * m * n],
                            false,
                            &bv.data()[ob..ob + k * n],
                            !*trans_b,
                            &mut ga[oa..oa + m * k],
                            true,
                        );
                    }
                    self.accumulate_data(grads, *a, ga);
                }
                if self.needs_grad(*b) {
                    let mut gb = vec![T::zero(); bv.numel()];
                    for (i, (&oa, &ob)) in plan.a_offsets.iter().zip(&plan.b_offsets).enumerate() {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let ai = &av.data()[oa..oa + m * k];
                        if *trans_b {
                            // dB[n, k] = dCᵀ · A
                            T::gemm(n, m, k, gi, true, ai, false, &mut gb[ob..ob + k * n], true);
                        } else {
                            // dB[k, n] = Aᵀ · dC
                            T::gemm(k, m, n, ai, true, gi, false, &mut gb[ob..ob + k * n], true);
                        }
                    }
                    self.accumulate_data(grads, *b, gb);
                }
            }
            Op::Linear { x, w } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (rows, cin, cout) = kernels::linear_dims(xv.shape(), wv.shape())?;
                if self.needs_grad(*x) {
                    let mut gx = vec![T::zero(); rows * cin];
                    T::gemm(rows, cout, cin, gd, false, wv.data(), true, &mut gx, false);
                    self.accumulate_data(grads, *x, gx);
                }
                if self.needs_grad(*w) {
                    let mut gw = vec![T::zero(); cin * cout];
                    T::gemm(cin, rows, cout, xv.data(), true, gd, false, &mut gw, false);
                    self.accumulate_data(grads, *w, gw);
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = kernels::split_axis(out.shape(), *axis);
                let y = out.data();
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for j in 0..len {
                            dot += gd[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..len {
                            let p = base + j * inner;
                            gx[p] = y[p] * (gd[p] - dot);
                        }
                    }
                }
                self.accumulate_data(grads, *x, gx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate_data(grads, *x, vec![gd[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let v = gd[0] / T::of(n as f64);
                self.accumulate_data(grads, *x, vec![v; n]);
            }
            Op::Reshape(x) => {
                self.accumulate_data(grads, *x, gd.to_vec());
            }
            Op::Permute { x, perm } => {
                let back = kernels::permute(g, &kernels::inverse_perm(perm))?;
                self.accumulate(grads, *x, back);
            }
            Op::Narrow { x, axis, start } => {
                let full = self.shape(*x)[*axis];
                let len = out.shape()[*axis];
                let back = kernels::pad(g, *axis, *start, full - start - len)?;
                self.accumulate(grads, *x, back);
            }
            Op::Pad { x, axis, before } => {
                let len = self.shape(*x)[*axis];
                let back = kernels::narrow(g, *axis, *before, len)?;
                self.accumulate(grads, *x, back);
            }
            Op::Concat { xs, axis } => {
                let mut start = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    if self.needs_grad(v) {
                        let part = kernels::narrow(g, *axis, start, len)?;
                        self.accumulate(grads, v, part);
                    }
                    start += len;
                }
            }
            Op::Upsample { x, fh, fw } => {
                let scale = T::of((fh * fw) as f64);
                let back = kernels::avg_pool(g, *fh, *fw)?.map(|v| v * scale);
                self.accumulate(grads, *x, back);
            }
            Op::AvgPool { x, fh, fw } => {
                let inv = T::one() / T::of((fh * fw) as f64);
                let back = kernels::upsample(g, *fh, *fw)?.map(|v| v * inv);
                self.accumulate(grads, *x, back);
            }
            Op::Conv2d { x, w, geom } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let rows = geom.b * geom.ho * geom.wo;
                let patch = geom.kh * geom.kw * geom.cin;
                if self.needs_grad(*w) {
                    let cols = kernels::im2col(xv.data(), geom);
                    let mut gw = vec![T::zero(); patch * geom.cout];
                    T::gemm(patch, rows, geom.cout, &cols, true, gd, false, &mut gw, false);
                    self.accumulate_data(grads, *w, gw);
                }
                if self.needs_grad(*x) {
                    let mut gcols = vec![T::zero(); rows * patch];
                    T::gemm(rows, geom.cout, patch, gd, false, wv.data(), true, &mut gcols, false);
                    let gx = kernels::col2im(&gcols, geom);
                    self.accumulate_data(grads, *x, gx);
                }
            }
            Op::DepthwiseXcorr { x, z } => {
                let (xv, zv) = (self.value(*x), self.value(*z));
                let ([b, hx, wx, c], [_, hz, wz, _]) = kernels::xcorr_dims(xv.shape(), zv.shape())?;
                let (ho, wo) = (hx - hz + 1, wx - wz + 1);
                let (need_x, need_z) = (self.needs_grad(*x), self.needs_grad(*z));
                let mut gx = vec![T::zero(); if need_x { xv.numel() } else { 0 }];
                let mut gz = vec![T::zero(); if need_z { zv.numel() } else { 0 }];
                let (xd, zd) = (xv.data(), zv.data());
                for bi in 0..b {
                    for i in 0..ho {
                        for j in 0..wo {
                            let o = ((bi * ho + i) * wo + j) * c;
                            for u in 0..hz {
                                for v in 0..wz {
                                    let xs = ((bi * hx + i + u) * wx + j + v) * c;
                                    let zs = ((bi * hz + u) * wz + v) * c;
                                    for ch in 0..c {
                                        let go = gd[o + ch];
                                        if need_x {
                                            gx[xs + ch] += go * zd[zs + ch];
                                        }
                                        if need_z {
                                            gz[zs + ch] += go * xd[xs + ch];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if need_x {
                    self.accumulate_data(grads, *x, gx);
                }
                if need_z {
                    self.accumulate_data(grads, *z, gz);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.shape(*gamma)[0];
                let gam = self.value(*gamma).data();
                let mut gx = vec![T::zero(); gd.len()];
                let mut gg = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                let inv_c = T::one() / T::of(c as f64);
                for (r, &rs) in rstd.iter().enumerate() {
                    let row = r * c..(r + 1) * c;
                    let (dy, xh) = (&gd[row.clone()], &xhat[row.clone()]);
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for i in 0..c {
                        let d = dy[i] * gam[i];
                        mean_d += d;
                        mean_dx += d * xh[i];
                        gg[i] += dy[i] * xh[i];
                        gbeta[i] += dy[i];
                    }
                    mean_d *= inv_c;
                    mean_dx *= inv_c;
                    for i in 0..c {
                        gx[r * c + i] = rs * (dy[i] * gam[i] - mean_d - xh[i] * mean_dx);
                    }
                }
                self.accumulate_data(grads, *x, gx);
                self.accumulate_data(grads, *gamma, gg);
                self.accumulate_data(grads, *beta, gbeta);
            }
            Op::BceWithLogits {
                logits,
                targets,
                weights,
            } => {
                let g0 = gd[0];
                let data = self
                    .value(*logits)
                    .data()
                    .iter()
                    .zip(targets.data())
                    .zip(weights.data())
                    .map(|((&x, &y), &w)| g0 * w * (sigmoid(x) - y))
                    .collect();
                self.accumulate_data(grads, *logits, data);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_and_square_closed_forms() {
        let x = Tensor::<f64>::from_f64([2, 3], &[1.0, -2.0, 0.5, 3.0, 0.0, -1.5]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone().with_grad(true));
        let s = tape.sum(v);
        let g = tape.backward(s).unwrap();
        assert!(g.get(v).unwrap().data().iter().all(|&d| d == 1.0));

        let mut tape = Tape::new();
        let v = tape.leaf(x.clone().with_grad(true));
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        for (d, xv) in g.get(v).unwrap().data().iter().zip(x.data()) {
            assert_eq!(*d, 2.0 * xv);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(Tensor::ones([3]).unwrap().with_grad(true));
        assert!(matches!(tape.backward(v), Err(TensorError::Contract { op: "backward", .. })));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::ones([2]).unwrap().with_grad(true));
        let b = tape.constant(Tensor::full([2], 3.0).unwrap());
        let p = tape.mul(a, b).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[3.0, 3.0]);
        assert!(g.get(b).is_none());
    }

    #[test]
    fn gradient_fanout_accumulates() {
        // f = sum(x*x + 3x) -> 2x + 3
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64([3], &[1.0, 2.0, -1.0]).unwrap().with_grad(true));
        let sq = tape.mul(x, x).unwrap();
        let t = tape.scale(x, 3.0);
        let y = tape.add(sq, t).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[5.0, 7.0, 1.0]);
    }

    #[test]
    fn mac_counter_tracks_matmul() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([3, 4, 5]).unwrap());
        let b = tape.constant(Tensor::zeros([3, 5, 2]).unwrap());
        tape.matmul(a, b).unwrap();
        assert_eq!(tape.macs(), 3 * 4 * 5 * 2);
    }

    #[test]
    fn op_names_cover_every_variant() {
        for name in OP_NAMES {
            assert!(!name.is_empty());
        }
        assert!(OP_NAMES.contains(&Op::<f32>::Softmax { x: Var(0), axis: 0 }.name()));
    }
}
