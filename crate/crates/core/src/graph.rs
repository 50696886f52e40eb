//! Execution backends.
//!
//! Model and loss code is written once against [`Graph`]. [`Tape`] records
//! every primitive for reverse-mode differentiation; [`Eager`] evaluates
//! immediately and lets intermediates drop, which is what inference and
//! benchmarking want at large resolutions.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::{self, BinaryOp};
use crate::tensor::{Real, Shape, Tensor};

pub trait Graph<T: Real> {
    type Value: Clone;

    /// Bring an existing tensor into the graph. On a tape, the tensor's
    /// `requires_grad` flag decides whether it receives a gradient.
    fn leaf(&mut self, t: Arc<Tensor<T>>) -> Self::Value;

    fn tensor<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<T>;

    fn conv2d(&mut self, x: &Self::Value, w: &Self::Value, b: &Self::Value, stride: usize, pad: usize) -> Result<Self::Value>;
    fn relu(&mut self, x: &Self::Value) -> Self::Value;
    fn sigmoid(&mut self, x: &Self::Value) -> Self::Value;
    fn maxpool2d(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn upsample_nearest(&mut self, x: &Self::Value) -> Self::Value;
    fn concat_channels(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn channel_mean(&mut self, x: &Self::Value) -> Self::Value;
    fn channel_std(&mut self, x: &Self::Value, eps: f64) -> Self::Value;
    fn binary(&mut self, op: BinaryOp, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn affine_scalar(&mut self, x: &Self::Value, scale: f64, shift: f64) -> Self::Value;
    fn sum(&mut self, x: &Self::Value) -> Self::Value;
    fn mean(&mut self, x: &Self::Value) -> Self::Value;
    fn gram(&mut self, x: &Self::Value) -> Self::Value;
    fn blur_valid(&mut self, x: &Self::Value, taps: &[f64]) -> Result<Self::Value>;
    fn reshape(&mut self, x: &Self::Value, shape: Shape) -> Result<Self::Value>;

    /// Number of `conv2d` calls executed so far.
    fn conv_count(&self) -> usize;

    fn shape(&self, v: &Self::Value) -> Shape {
        self.tensor(v).shape()
    }

    fn constant(&mut self, t: Tensor<T>) -> Self::Value {
        self.leaf(Arc::new(t.with_requires_grad(false)))
    }

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.binary(BinaryOp::Add, a, b)
    }
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.binary(BinaryOp::Sub, a, b)
    }
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.binary(BinaryOp::Mul, a, b)
    }
    fn div(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.binary(BinaryOp::Div, a, b)
    }
    fn scale(&mut self, x: &Self::Value, s: f64) -> Self::Value {
        self.affine_scalar(x, s, 0.0)
    }

    /// Per-channel (mean, std) with `std = sqrt(var + eps)`.
    fn channel_moments(&mut self, x: &Self::Value, eps: f64) -> (Self::Value, Self::Value) {
        (self.channel_mean(x), self.channel_std(x, eps))
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Relu(Var),
    Sigmoid(Var),
    MaxPool { x: Var, argmax: Vec<u32> },
    Upsample(Var),
    Concat(Var, Var),
    ChannelMean(Var),
    ChannelStd(Var),
    Binary(BinaryOp, Var, Var),
    Affine { x: Var, scale: f64 },
    Sum(Var),
    Mean(Var),
    Gram(Var),
    Blur { x: Var, taps: Vec<f64> },
    Reshape(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } => vec![x, w, b],
            Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::MaxPool { x, .. }
            | Op::Upsample(x)
            | Op::ChannelMean(x)
            | Op::ChannelStd(x)
            | Op::Affine { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Gram(x)
            | Op::Blur { x, .. }
            | Op::Reshape(x) => vec![x],
            Op::Concat(a, b) | Op::Binary(_, a, b) => vec![a, b],
        }
    }
}

struct Node<T: Real> {
    value: Arc<Tensor<T>>,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode recording of a forward computation.
///
/// Nodes are appended in execution order; [`Tape::backward`] walks them in
/// exact reverse. A tape is single-use per forward pass.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    convs: usize,
    /// Replayed switches and the next ReLU / max-pool to consume.
    forced: Option<(Switches, usize, usize)>,
}

/// ReLU masks and max-pool argmax indices recorded from a forward pass.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Switches {
    pub relu: Vec<Vec<bool>>,
    pub pool: Vec<Vec<u32>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Move the gradient of `v` into `t`'s grad slot (accumulating).
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor<T>) {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => t.accumulate_grad(&vec![T::ZERO; t.numel()]),
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            convs: 0,
            forced: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Arc<Tensor<T>> {
        &self.nodes[v.0].value
    }

    /// Every piecewise choice made so far: ReLU masks and max-pool winners,
    /// in execution order.
    pub fn switches(&self) -> Switches {
        let mut sw = Switches::default();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => sw.relu.push(self.val(*x).data().iter().map(|v| *v > T::ZERO).collect()),
                Op::MaxPool { argmax, .. } => sw.pool.push(argmax.clone()),
                _ => {}
            }
        }
        sw
    }

    /// A tape whose ReLUs and max-pools replay `switches` instead of
    /// deciding from their inputs, so the forward pass stays on one linear
    /// piece. Only meaningful for forward evaluation.
    pub fn with_switches(switches: Switches) -> Self {
        Tape {
            forced: Some((switches, 0, 0)),
            ..Self::new()
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Reverse pass from a scalar `loss`. Gradients are kept for leaves that
    /// require one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.val(loss).shape();
        if !ls.is_scalar() {
            return Err(Error::NotScalar(ls));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::ONE]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            // interior gradients are dropped once propagated; only leaves keep theirs
            let contributions = self.local_grads(node, &g);
            for (var, contrib) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(contrib) {
                            *a = T::from_f64(a.to_f64() + c.to_f64());
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node<T>, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            &Op::Conv2d { x, w, b, stride, pad } => {
                let (gx, gw, gb) = ops::conv2d_backward(self.val(x), self.val(w), g, stride, pad, rg(x), rg(w) || rg(b));
                let mut out = Vec::with_capacity(3);
                if let Some(gx) = gx {
                    out.push((x, gx));
                }
                if let (Some(gw), Some(gb)) = (gw, gb) {
                    out.push((w, gw));
                    out.push((b, gb));
                }
                out
            }
            &Op::Relu(x) => vec![(x, ops::relu_backward(self.val(x), g))],
            &Op::Sigmoid(x) => vec![(x, ops::sigmoid_backward(&node.value, g))],
            Op::MaxPool { x, argmax } => vec![(*x, ops::maxpool2d_backward(self.val(*x).shape(), argmax, g))],
            &Op::Upsample(x) => vec![(x, ops::upsample_nearest_backward(self.val(x).shape(), g))],
            &Op::Concat(a, b) => {
                let (ga, gb) = ops::concat_channels_backward(self.val(a).shape(), self.val(b).shape(), g);
                vec![(a, ga), (b, gb)]
            }
            &Op::ChannelMean(x) => vec![(x, ops::channel_mean_backward(self.val(x).shape(), g))],
            &Op::ChannelStd(x) => vec![(x, ops::channel_std_backward(self.val(x), &node.value, g))],
            &Op::Binary(op, a, b) => {
                let (ga, gb) = ops::binary_backward(op, self.val(a), self.val(b), g);
                vec![(a, ga), (b, gb)]
            }
            &Op::Affine { x, scale } => vec![(x, g.iter().map(|v| T::from_f64(v.to_f64() * scale)).collect())],
            &Op::Sum(x) => vec![(x, vec![g[0]; self.val(x).numel()])],
            &Op::Mean(x) => {
                let n = self.val(x).numel();
                vec![(x, vec![T::from_f64(g[0].to_f64() / n as f64); n])]
            }
            &Op::Gram(x) => vec![(x, ops::gram_backward(self.val(x), g))],
            Op::Blur { x, taps } => vec![(*x, ops::blur_valid_backward(self.val(*x).shape(), taps, g))],
            &Op::Reshape(x) => vec![(x, g.to_vec())],
        }
    }
}

impl<T: Real> Graph<T> for Tape<T> {
    type Value = Var;

    fn leaf(&mut self, t: Arc<Tensor<T>>) -> Var {
        let requires_grad = t.requires_grad;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn tensor<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        self.val(*v)
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: &Var, stride: usize, pad: usize) -> Result<Var> {
        let y = ops::conv2d(self.val(*x), self.val(*w), self.val(*b), stride, pad)?;
        self.convs += 1;
        Ok(self.push(y, Op::Conv2d { x: *x, w: *w, b: *b, stride, pad }))
    }

    fn relu(&mut self, x: &Var) -> Var {
        let y = match &mut self.forced {
            Some((sw, next, _)) => {
                let mask = &sw.relu[*next];
                *next += 1;
                let xv = &self.nodes[x.0].value;
                let data = xv.data().iter().zip(mask).map(|(&v, &on)| if on { v } else { T::ZERO }).collect();
                Tensor::new(xv.shape(), data).expect("mask matches input")
            }
            None => ops::relu(self.val(*x)),
        };
        self.push(y, Op::Relu(*x))
    }

    fn sigmoid(&mut self, x: &Var) -> Var {
        let y = ops::sigmoid(self.val(*x));
        self.push(y, Op::Sigmoid(*x))
    }

    fn maxpool2d(&mut self, x: &Var) -> Result<Var> {
        let (mut y, mut argmax) = ops::maxpool2d(self.val(*x))?;
        if let Some((sw, _, next)) = &mut self.forced {
            argmax = sw.pool[*next].clone();
            *next += 1;
            let xd = self.nodes[x.0].value.data();
            for (o, &i) in y.data_mut().iter_mut().zip(&argmax) {
                *o = xd[i as usize];
            }
        }
        Ok(self.push(y, Op::MaxPool { x: *x, argmax }))
    }

    fn upsample_nearest(&mut self, x: &Var) -> Var {
        let y = ops::upsample_nearest(self.val(*x));
        self.push(y, Op::Upsample(*x))
    }

    fn concat_channels(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = ops::concat_channels(self.val(*a), self.val(*b))?;
        Ok(self.push(y, Op::Concat(*a, *b)))
    }

    fn channel_mean(&mut self, x: &Var) -> Var {
        let y = ops::channel_mean(self.val(*x));
        self.push(y, Op::ChannelMean(*x))
    }

    fn channel_std(&mut self, x: &Var, eps: f64) -> Var {
        let y = ops::channel_std(self.val(*x), eps);
        self.push(y, Op::ChannelStd(*x))
    }

    fn binary(&mut self, op: BinaryOp, a: &Var, b: &Var) -> Result<Var> {
        let y = ops::binary(op, self.val(*a), self.val(*b))?;
        Ok(self.push(y, Op::Binary(op, *a, *b)))
    }

    fn affine_scalar(&mut self, x: &Var, scale: f64, shift: f64) -> Var {
        let y = ops::affine_scalar(self.val(*x), scale, shift);
        self.push(y, Op::Affine { x: *x, scale })
    }

    fn sum(&mut self, x: &Var) -> Var {
        let y = ops::sum(self.val(*x));
        self.push(y, Op::Sum(*x))
    }

    fn mean(&mut self, x: &Var) -> Var {
        let y = ops::mean(self.val(*x));
        self.push(y, Op::Mean(*x))
    }

    fn gram(&mut self, x: &Var) -> Var {
        let y = ops::gram(self.val(*x));
        self.push(y, Op::Gram(*x))
    }

    fn blur_valid(&mut self, x: &Var, taps: &[f64]) -> Result<Var> {
        let y = ops::blur_valid(self.val(*x), taps)?;
        Ok(self.push(y, Op::Blur { x: *x, taps: taps.to_vec() }))
    }

    fn reshape(&mut self, x: &Var, shape: Shape) -> Result<Var> {
        let y = self.val(*x).reshape(shape)?.with_requires_grad(false);
        Ok(self.push(y, Op::Reshape(*x)))
    }

    fn conv_count(&self) -> usize {
        self.convs
    }
}

/// Immediate evaluation without recording.
#[derive(Default)]
pub struct Eager {
    convs: usize,
}

impl Eager {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Real> Graph<T> for Eager {
    type Value = Arc<Tensor<T>>;

    fn leaf(&mut self, t: Arc<Tensor<T>>) -> Self::Value {
        t
    }

    fn tensor<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<T> {
        v
    }

    fn conv2d(&mut self, x: &Self::Value, w: &Self::Value, b: &Self::Value, stride: usize, pad: usize) -> Result<Self::Value> {
        self.convs += 1;
        Ok(Arc::new(ops::conv2d(x, w, b, stride, pad)?))
    }

    fn relu(&mut self, x: &Self::Value) -> Self::Value {
        Arc::new(ops::relu(x))
    }

    fn sigmoid(&mut self, x: &Self::Value) -> Self::Value {
        Arc::new(ops::sigmoid(x))
    }

    fn maxpool2d(&mut self, x: &Self::Value) -> Result<Self::Value> {
        Ok(Arc::new(ops::maxpool2d(x)?.0))
    }

    fn upsample_nearest(&mut self, x: &Self::Value) -> Self::Value {
        Arc::new(ops::upsample_nearest(x))
    }

    fn concat_channels(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        Ok(Arc::new(ops::concat_channels(a, b)?))
    }

    fn channel_mean(&mut self, x: &Self::Value) -> Self::Value {
        Arc::new(ops::channel_mean(x))
    }

    fn channel_std(&mut self, x: &Self::Value, eps: f64) -> Self::Value {
        Arc::new(ops::channel_std(x, eps))
    }

    fn binary(&mut self, op: BinaryOp, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        Ok(Arc::new(ops::binary(op, a, b)?))
    }

    fn affine_scalar(&mut self, x: &Self::Value, scale: f64, shift: f64) -> Self::Value {
        Arc::new(ops::affine_scalar(x, scale, shift))
    }

    fn sum(&mut self, x: &Self::Value) -> Self::Value {
        Arc::new(ops::sum(x))
    }

    fn mean(&mut self, x: &Self::Value) -> Self::Value {
        Arc::new(ops::mean(x))
    }

    fn gram(&mut self, x: &Self::Value) -> Self::Value {
        Arc::new(ops::gram(x))
    }

    fn blur_valid(&mut self, x: &Self::Value, taps: &[f64]) -> Result<Self::Value> {
        Ok(Arc::new(ops::blur_valid(x, taps)?))
    }

    fn reshape(&mut self, x: &Self::Value, shape: Shape) -> Result<Self::Value> {
        Ok(Arc::new(x.reshape(shape)?))
    }

    fn conv_count(&self) -> usize {
        self.convs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var(tape: &mut Tape<f64>, shape: [usize; 4], v: &[f64]) -> Var {
        tape.leaf(Arc::new(Tensor::new(shape, v.to_vec()).unwrap().with_requires_grad(true)))
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = var(&mut tape, [1, 2, 2, 3], &[0.5; 12]);
        let loss = tape.sum(&x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 12]);
    }

    #[test]
    fn square_at_three() {
        let mut tape = Tape::new();
        let x = var(&mut tape, [1, 1, 1, 1], &[3.0]);
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum(&sq);
        assert_eq!(tape.backward(loss).unwrap().get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = var(&mut tape, [1, 1, 1, 2], &[1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = var(&mut tape, [1, 1, 1, 1], &[2.0]);
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.mul(&x, &c).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[5.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn repeated_backward_accumulates_into_slot() {
        let mut tape = Tape::<f64>::new();
        let x = var(&mut tape, [1, 1, 1, 1], &[3.0]);
        let sq = tape.mul(&x, &x).unwrap();
        let mut t = (**tape.value(x)).clone();
        for _ in 0..2 {
            tape.backward(sq).unwrap().accumulate_into(x, &mut t);
        }
        assert_eq!(t.grad.as_deref(), Some(&[12.0][..]));
    }

    #[test]
    fn tape_and_eager_agree() {
        let x = Arc::new(Tensor::<f32>::from_fn([1, 2, 4, 4], |_, c, y, x| (c * 16 + y * 4 + x) as f32 * 0.1 - 1.0));
        let w = Arc::new(Tensor::<f32>::from_fn([3, 2, 3, 3], |o, i, y, x| ((o + i + y * x) % 5) as f32 * 0.2 - 0.4));
        let b = Arc::new(Tensor::<f32>::full([3, 1, 1, 1], 0.1));
        fn run<G: Graph<f32>>(g: &mut G, x: &Arc<Tensor<f32>>, w: &Arc<Tensor<f32>>, b: &Arc<Tensor<f32>>) -> Tensor<f32> {
            let (x, w, b) = (g.leaf(x.clone()), g.leaf(w.clone()), g.leaf(b.clone()));
            let y = g.conv2d(&x, &w, &b, 1, 1).unwrap();
            let y = g.relu(&y);
            let y = g.maxpool2d(&y).unwrap();
            let y = g.upsample_nearest(&y);
            g.tensor(&y).clone()
        }
        let mut tape = Tape::new();
        let mut eager = Eager::new();
        assert_eq!(run(&mut tape, &x, &w, &b), run(&mut eager, &x, &w, &b));
        assert_eq!(Graph::<f32>::conv_count(&tape), 1);
        assert_eq!(Graph::<f32>::conv_count(&eager), 1);
    }
}
