//! Wengert-tape reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value and the inputs it needs for the backward rule. Nodes are
//! appended in evaluation order, so reverse insertion order is a valid
//! reverse topological order. Gradients of parameter leaves are returned as a
//! [`Gradients`] value and added into a [`ParamStore`] by the caller.

mod conv;
mod elementwise;
mod linalg;
mod loss_ops;
mod node_ops;
mod shape_ops;

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{BufferId, ParamId, ParamStore};
use crate::real::Real;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub use conv::{BatchNormRunning, ConvGeometry, ConvSpec};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

/// Forward-pass mode. Training threads the dropout RNG explicitly.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut SeededRng),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Observed batch statistics for one batch-norm layer, to be folded into its
/// running buffers after the step.
#[derive(Debug, Clone)]
pub struct BatchNormUpdate<T> {
    pub mean_buffer: BufferId,
    pub var_buffer: BufferId,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance.
    pub batch_var: Vec<T>,
}

pub(crate) enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Softmax { x: Var, axis: usize },
    Dropout { x: Var, mask: Vec<T> },
    Sum(Var),
    MeanAxis { x: Var, axis: usize },
    MaxAxis { x: Var, argmax: Vec<usize> },
    Reshape(Var),
    Transpose(Var),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    EdgeGateMean { ah: Var, bh: Var, vh: Var },
    NodeDot { h: Var, w: Var, b: Var },
    Bce { p: Var, y: Vec<T>, eps: T },
    Mse { pred: Var, target: Vec<T> },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_vars: BTreeMap<ParamId, Var>,
    bn_updates: Vec<BatchNormUpdate<T>>,
    finished: bool,
    no_grad: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_vars: BTreeMap::new(),
            bn_updates: Vec::new(),
            finished: false,
            no_grad: false,
        }
    }

    /// A tape that records values only: nothing requires a gradient, so ops
    /// skip the bookkeeping their backward rules would need.
    pub fn inference() -> Self {
        Tape {
            no_grad: true,
            ..Self::new()
        }
    }

    /// Whether this tape was created by [`Tape::inference`].
    pub fn is_inference(&self) -> bool {
        self.no_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input (no gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records an input leaf; when `requires_grad` is set its gradient is
    /// reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, mut value: Tensor<T>, requires_grad: bool) -> Var {
        value.set_requires_grad(false);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad && !self.no_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter. Repeated binds of one id return the same var.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.param(id);
        let mut value = p.clone();
        let trainable = value.requires_grad();
        value.set_requires_grad(false);
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
            needs_grad: trainable && !self.no_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Scalar value of a one-element var.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn record_bn_update(&mut self, update: BatchNormUpdate<T>) {
        self.bn_updates.push(update);
    }

    /// Batch-norm statistics observed during a training forward pass.
    pub fn take_bn_updates(&mut self) -> Vec<BatchNormUpdate<T>> {
        core::mem::take(&mut self.bn_updates)
    }

    /// Backpropagates from a scalar `loss`.
    ///
    /// A tape can be differentiated once; a second call is an error rather
    /// than a silent doubling of gradients.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.finished {
            return Err(Error::BackwardTwice);
        }
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.finished = true;

        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients {
            params: Vec::new(),
            leaves: BTreeMap::new(),
        };

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(Var(i), g);
                }
                Op::Param(id) => out.params.push((*id, g)),
                _ => {
                    let mut acc = Acc {
                        nodes: &self.nodes,
                        grads: &mut grads,
                    };
                    propagate(&self.nodes, i, &g, &mut acc);
                }
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        Ok(out)
    }
}

/// Gradient accumulator used by the backward rules.
pub(crate) struct Acc<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut Vec<Option<Vec<T>>>,
}

impl<T: Real> Acc<'_, T> {
    /// Gives `f` the gradient buffer of `v`, allocating it on first use.
    /// Inputs that need no gradient are skipped.
    pub(crate) fn with(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let len = self.nodes[v.0].value.numel();
        let slot = &mut self.grads[v.0];
        let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
        f(buf);
    }

    pub(crate) fn add(&mut self, v: Var, delta: &[T]) {
        self.with(v, |buf| {
            for (b, &d) in buf.iter_mut().zip(delta) {
                *b += d;
            }
        });
    }

    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }
}

fn propagate<T: Real>(nodes: &[Node<T>], i: usize, g: &[T], acc: &mut Acc<'_, T>) {
    let node = &nodes[i];
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        Op::Add(a, b) => {
            acc.add(*a, g);
            acc.add(*b, g);
        }
        Op::Sub(a, b) => {
            acc.add(*a, g);
            acc.with(*b, |buf| {
                for (x, &d) in buf.iter_mut().zip(g) {
                    *x -= d;
                }
            });
        }
        Op::Mul(a, b) => elementwise::mul_backward(val(*a), val(*b), *a, *b, g, acc),
        Op::Scale(x, c) => {
            let c = *c;
            acc.with(*x, |buf| {
                for (b, &d) in buf.iter_mut().zip(g) {
                    *b += c * d;
                }
            });
        }
        Op::Relu(x) => elementwise::relu_backward(&node.value, *x, g, acc),
        Op::Sigmoid(x) => elementwise::sigmoid_backward(&node.value, *x, g, acc),
        Op::Softmax { x, axis } => elementwise::softmax_backward(&node.value, *x, *axis, g, acc),
        Op::Dropout { x, mask } => {
            acc.with(*x, |buf| {
                for ((b, &d), &m) in buf.iter_mut().zip(g).zip(mask) {
                    *b += d * m;
                }
            });
        }
        Op::Sum(x) => {
            let d = g[0];
            acc.with(*x, |buf| buf.iter_mut().for_each(|b| *b += d));
        }
        Op::MeanAxis { x, axis } => shape_ops::mean_axis_backward(val(*x), *x, *axis, g, acc),
        Op::MaxAxis { x, argmax, .. } => shape_ops::scatter_backward(*x, argmax, g, acc),
        Op::Reshape(x) => acc.add(*x, g),
        Op::Transpose(x) => shape_ops::transpose_backward(val(*x), *x, g, acc),
        Op::Narrow { x, axis, start } => {
            shape_ops::narrow_backward(val(*x), &node.value, *x, *axis, *start, g, acc)
        }
        Op::Concat { xs, axis } => shape_ops::concat_backward(nodes, xs, *axis, g, acc),
        Op::MatMul(a, b) => linalg::matmul_backward(val(*a), val(*b), *a, *b, g, acc),
        Op::Linear { x, w, b } => linalg::linear_backward(val(*x), val(*w), *x, *w, *b, g, acc),
        Op::Conv2d { x, w, b, geom } => {
            conv::conv2d_backward(val(*x), val(*w), *x, *w, *b, geom, g, acc)
        }
        Op::MaxPool2d { x, argmax } => shape_ops::scatter_backward(*x, argmax, g, acc),
        Op::GlobalAvgPool(x) => conv::global_avg_pool_backward(val(*x), *x, g, acc),
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            training,
        } => conv::batch_norm_backward(
            val(*x),
            val(*gamma),
            (*x, *gamma, *beta),
            xhat,
            inv_std,
            *training,
            g,
            acc,
        ),
        Op::EdgeGateMean { ah, bh, vh } => {
            node_ops::edge_gate_backward(val(*ah), val(*bh), val(*vh), (*ah, *bh, *vh), g, acc)
        }
        Op::NodeDot { h, w, b } => {
            node_ops::node_dot_backward(val(*h), val(*w), (*h, *w, *b), g, acc)
        }
        Op::Bce { p, y, eps } => loss_ops::bce_backward(val(*p), *p, y, *eps, g, acc),
        Op::Mse { pred, target } => loss_ops::mse_backward(val(*pred), *pred, target, g, acc),
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    params: Vec<(ParamId, Vec<T>)>,
    leaves: BTreeMap<Var, Vec<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradients of parameters that the loss depends on, ordered by id.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .binary_search_by_key(&id, |(i, _)| *i)
            .ok()
            .map(|k| self.params[k].1.as_slice())
    }

    /// Gradient of a leaf created with `requires_grad`.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.leaves.get(&v).map(Vec::as_slice)
    }
}
