//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] is an append-only arena of nodes. Every primitive appends one
//! node whose inputs are strictly earlier nodes, so the arena order is a
//! topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! Spatial operations accept `[C, H, W]` or batched `[N, C, H, W]` tensors;
//! map-wise operations (softmax over space, bilinear resampling, pooling)
//! treat the last two axes as the spatial plane and every leading axis as a
//! batch of planes. Reductions run in fixed row-major order, so a forward
//! pass is bit-reproducible for fixed inputs.

mod conv;
mod ops;
mod resample;

use std::sync::Arc;

pub use conv::ConvGeom;
pub use resample::bilinear_source_coord;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use resample::BilinearPlan;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `a * x + b`; only the scale matters for the gradient.
    Affine(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    PowAbs(Var, T),
    SumAll(Var),
    MeanAll(Var),
    SumChannels(Var),
    MaxChannels(Var, Vec<u32>),
    SelectChannel(Var, usize),
    ConcatChannels(Var, Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Bilinear(Var, Arc<BilinearPlan>),
    MaxPool2(Var, Vec<u32>),
    AvgPool2(Var),
    SpatialSoftmax(Var),
    ChannelSoftmax(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    NormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    NormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    WeightedCe {
        logits: Var,
        probs: Vec<T>,
        labels: Arc<Vec<u8>>,
        class_weights: Vec<T>,
    },
    Bce {
        probs: Var,
        targets: Vec<T>,
    },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// What a backward sweep touched.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackwardStats {
    pub visited: usize,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf. Gradients are accumulated only for leaves with
    /// `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Same value, cut from the graph: nothing flows back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; zeros when nothing reached it.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        let shape = self.nodes[v.0].value.shape();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.to_vec(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Propagates d(loss)/d(node) to every leaf that requires a gradient and
    /// adds it to that leaf's accumulator. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<BackwardStats> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            visited += 1;
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            ops::backprop(&self.nodes, i, &g, &mut adj);
        }
        Ok(BackwardStats { visited })
    }
}

/// Returns the adjoint buffer of `v`, allocating it on first use, or `None`
/// when `v` does not need a gradient.
pub(crate) fn adj_mut<'a, T: Scalar>(
    nodes: &[Node<T>],
    adj: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(adj[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

/// `(N, C, H, W)` view of a rank-3 or rank-4 shape.
pub(crate) fn nchw(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(format!(
            "expected [C,H,W] or [N,C,H,W], got {shape:?}"
        ))),
    }
}

/// `(planes, H, W)` view: last two axes spatial, leading axes batched.
pub(crate) fn planes(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(format!(
            "expected at least two spatial axes, got {shape:?}"
        )));
    }
    let r = shape.len();
    Ok((shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1]))
}
