use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::{kernels, Tensor};
use crate::error::{Error, Result};

/// A node in the computation graph.
///
/// Cloning a `Var` is cheap and shares the node. Nodes that do not depend on
/// any gradient-tracked leaf drop their operation record immediately, so
/// inference-only graphs release intermediates as soon as they go out of scope.
#[derive(Clone)]
pub struct Var(Rc<Node>);

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Option<Op>,
    grad: RefCell<Option<Tensor>>,
}

enum Op {
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Tensor),
    Silu(Var),
    Huber(Var, f64),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    Upsample(Var, usize),
    Downsample(Var, usize),
    Conv2d { input: Var, kernel: Var, stride: usize, padding: usize },
    ChannelBias(Var, Var),
    Linear { x: Var, weight: Var, bias: Option<Var> },
}

impl Op {
    fn inputs(&self) -> Vec<&Var> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ChannelBias(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::MulConst(a, _)
            | Op::Silu(a)
            | Op::Huber(a, _)
            | Op::Clamp(a, _, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Upsample(a, _)
            | Op::Downsample(a, _) => vec![a],
            Op::Concat(parts) => parts.iter().collect(),
            Op::Conv2d { input, kernel, .. } => vec![input, kernel],
            Op::Linear { x, weight, bias } => {
                let mut v = vec![x, weight];
                v.extend(bias.iter());
                v
            }
        }
    }

    /// Adjoints for each input, in the order of [`Op::inputs`].
    fn vjp(&self, grad: &Tensor) -> Result<Vec<Tensor>> {
        Ok(match self {
            Op::Add(..) => vec![grad.clone(), grad.clone()],
            Op::Sub(..) => vec![grad.clone(), grad.map(|g| -g)],
            Op::Mul(a, b) => vec![
                grad.zip_map(b.value(), |g, bv| g * bv)?,
                grad.zip_map(a.value(), |g, av| g * av)?,
            ],
            Op::Scale(_, s) => vec![grad.map(|g| g * s)],
            Op::AddScalar(_) => vec![grad.clone()],
            Op::MulConst(_, c) => vec![grad.zip_map(c, |g, cv| g * cv)?],
            Op::Silu(a) => vec![grad.zip_map(a.value(), |g, x| g * kernels::silu_derivative(x))?],
            Op::Huber(a, delta) => {
                vec![grad.zip_map(a.value(), |g, r| g * kernels::huber_derivative(r, *delta))?]
            }
            Op::Clamp(a, lo, hi) => vec![grad.zip_map(a.value(), |g, x| {
                if (*lo..=*hi).contains(&x) {
                    g
                } else {
                    0.0
                }
            })?],
            Op::Sum(a) => vec![Tensor::full(a.shape(), grad.item())],
            Op::Mean(a) => {
                let n = a.value().numel() as f64;
                vec![Tensor::full(a.shape(), grad.item() / n)]
            }
            Op::Concat(parts) => {
                let channels: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
                kernels::split_channels(grad, &channels)?
            }
            Op::Upsample(_, f) => vec![kernels::block_sum(grad, *f)?],
            Op::Downsample(_, f) => {
                let inv = 1.0 / (f * f) as f64;
                vec![kernels::upsample_nearest(grad, *f)?.map(|g| g * inv)]
            }
            Op::Conv2d { input, kernel, stride, padding } => vec![
                kernels::conv2d_grad_input(grad, kernel.value(), input.shape(), *stride, *padding)?,
                kernels::conv2d_grad_kernel(grad, input.value(), kernel.shape(), *stride, *padding)?,
            ],
            Op::ChannelBias(_, bias) => {
                vec![grad.clone(), kernels::channel_bias_grad(grad, bias.shape())?]
            }
            Op::Linear { x, weight, bias } => {
                let (gx, gw, gb) = kernels::linear_grads(grad, x.value(), weight.value());
                let mut v = vec![gx, gw];
                if bias.is_some() {
                    v.push(gb);
                }
                v
            }
        })
    }
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    /// A gradient-tracked leaf.
    pub fn leaf(value: Tensor) -> Self {
        Self::from_node(value, true, None)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(value: Tensor) -> Self {
        Self::from_node(value, false, None)
    }

    fn from_node(value: Tensor, requires_grad: bool, op: Option<Op>) -> Self {
        Var(Rc::new(Node { value, requires_grad, op, grad: RefCell::new(None) }))
    }

    fn derived(value: Tensor, op: Op) -> Self {
        let requires_grad = op.inputs().iter().any(|v| v.0.requires_grad);
        let op = requires_grad.then_some(op);
        Self::from_node(value, requires_grad, op)
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Tensor> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        self.0.grad.borrow_mut().take();
    }

    /// A constant sharing this node's value; gradients stop here.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        let v = self.value().zip_map(other.value(), |a, b| a + b)?;
        Ok(Self::derived(v, Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        let v = self.value().zip_map(other.value(), |a, b| a - b)?;
        Ok(Self::derived(v, Op::Sub(self.clone(), other.clone())))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        let v = self.value().zip_map(other.value(), |a, b| a * b)?;
        Ok(Self::derived(v, Op::Mul(self.clone(), other.clone())))
    }

    pub fn scale(&self, s: f64) -> Var {
        Self::derived(self.value().map(|a| a * s), Op::Scale(self.clone(), s))
    }

    pub fn add_scalar(&self, s: f64) -> Var {
        Self::derived(self.value().map(|a| a + s), Op::AddScalar(self.clone()))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&self, c: &Tensor) -> Result<Var> {
        let v = self.value().zip_map(c, |a, b| a * b)?;
        Ok(Self::derived(v, Op::MulConst(self.clone(), c.clone())))
    }

    pub fn silu(&self) -> Var {
        Self::derived(self.value().map(kernels::silu), Op::Silu(self.clone()))
    }

    pub fn huber(&self, delta: f64) -> Var {
        Self::derived(self.value().map(|r| kernels::huber(r, delta)), Op::Huber(self.clone(), delta))
    }

    pub fn square(&self) -> Var {
        self.mul(self).expect("a tensor always matches its own shape")
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        Self::derived(self.value().map(|a| a.clamp(lo, hi)), Op::Clamp(self.clone(), lo, hi))
    }

    pub fn sum(&self) -> Var {
        Self::derived(Tensor::scalar(self.value().sum()), Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Var {
        Self::derived(Tensor::scalar(self.value().mean()), Op::Mean(self.clone()))
    }

    pub fn concat_channels(parts: &[&Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|p| p.value()).collect();
        let v = kernels::concat_channels(&values)?;
        Ok(Self::derived(v, Op::Concat(parts.iter().map(|&p| p.clone()).collect())))
    }

    pub fn upsample_nearest(&self, factor: usize) -> Result<Var> {
        let v = kernels::upsample_nearest(self.value(), factor)?;
        Ok(Self::derived(v, Op::Upsample(self.clone(), factor)))
    }

    pub fn downsample_average(&self, factor: usize) -> Result<Var> {
        let v = kernels::downsample_average(self.value(), factor)?;
        Ok(Self::derived(v, Op::Downsample(self.clone(), factor)))
    }

    pub fn conv2d(&self, kernel: &Var, stride: usize, padding: usize) -> Result<Var> {
        let v = kernels::conv2d(self.value(), kernel.value(), stride, padding)?;
        Ok(Self::derived(
            v,
            Op::Conv2d { input: self.clone(), kernel: kernel.clone(), stride, padding },
        ))
    }

    /// Adds a `[C]` or `[N, C]` bias to every pixel of an NCHW tensor.
    pub fn add_channel_bias(&self, bias: &Var) -> Result<Var> {
        let v = kernels::add_channel_bias(self.value(), bias.value())?;
        Ok(Self::derived(v, Op::ChannelBias(self.clone(), bias.clone())))
    }

    pub fn linear(&self, weight: &Var, bias: Option<&Var>) -> Result<Var> {
        let v = kernels::linear(self.value(), weight.value(), bias.map(Var::value))?;
        Ok(Self::derived(
            v,
            Op::Linear { x: self.clone(), weight: weight.clone(), bias: bias.cloned() },
        ))
    }

    /// Reverse-mode pass from a scalar; gradients accumulate into leaves.
    pub fn backward(&self) -> Result<()> {
        if !self.value().is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        Tape::record(self).replay(Tensor::ones(self.shape()))
    }
}

/// Topologically ordered view of the graph behind one output.
///
/// Only nodes that depend on a gradient-tracked leaf are recorded.
pub struct Tape {
    order: Vec<Var>,
    index: HashMap<*const Node, usize>,
}

impl Tape {
    pub fn record(output: &Var) -> Self {
        let mut order = Vec::new();
        let mut index = HashMap::new();
        if !output.requires_grad() {
            return Tape { order, index };
        }
        let mut visited: HashMap<*const Node, ()> = HashMap::new();
        let mut stack: Vec<(Var, bool)> = vec![(output.clone(), false)];
        while let Some((var, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&var.0);
            if expanded {
                index.insert(key, order.len());
                order.push(var);
                continue;
            }
            if visited.insert(key, ()).is_some() {
                continue;
            }
            stack.push((var.clone(), true));
            if let Some(op) = &var.0.op {
                for input in op.inputs().into_iter().rev() {
                    if input.requires_grad() && !visited.contains_key(&Rc::as_ptr(&input.0)) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        Tape { order, index }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Replays adjoints from the last recorded node with the given seed gradient.
    pub fn replay(&self, seed: Tensor) -> Result<()> {
        let Some(last) = self.order.last() else {
            return Ok(());
        };
        last.value().expect_same_shape(&seed)?;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.order.len()];
        *grads.last_mut().unwrap() = Some(seed);
        for i in (0..self.order.len()).rev() {
            let Some(grad) = grads[i].take() else { continue };
            let node = &self.order[i].0;
            let Some(op) = &node.op else {
                let mut slot = node.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => acc.add_assign(&grad),
                    None => *slot = Some(grad),
                }
                continue;
            };
            let adjoints = op.vjp(&grad)?;
            for (input, adj) in op.inputs().into_iter().zip(adjoints) {
                if !input.requires_grad() {
                    continue;
                }
                let j = self.index[&Rc::as_ptr(&input.0)];
                match grads[j].as_mut() {
                    Some(acc) => acc.add_assign(&adj),
                    None => grads[j] = Some(adj),
                }
            }
        }
        Ok(())
    }
}
