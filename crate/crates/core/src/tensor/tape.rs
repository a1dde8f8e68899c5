//! Wengert-style tape: every forward op appends a node holding its output
//! value plus whatever it saved for the backward pass. `backward` walks the
//! nodes in reverse insertion order, which is a valid reverse topological
//! order because a node can only reference nodes created before it.

use super::conv::ConvSpec;
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation defined outside the engine (e.g. a fused loss).
///
/// `backward` receives the forward inputs, the forward output and the
/// upstream gradient, and returns one gradient per input (`None` to skip).
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        out_grad: &[Float],
    ) -> Vec<Option<Vec<Float>>>;
}

pub(super) enum Op {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        spec: ConvSpec,
    },
    MaxPool2d {
        x: usize,
        argmax: Vec<u32>,
    },
    Upsample2x {
        x: usize,
    },
    Relu {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    GlobalAvgPool {
        x: usize,
    },
    Dense {
        x: usize,
        w: usize,
        b: usize,
    },
    InstanceNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<Float>,
        inv_std: Vec<Float>,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        factor: Float,
    },
    MulChannelwise {
        x: usize,
        s: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    Reshape {
        x: usize,
    },
    Sum {
        x: usize,
    },
    WeightedSum {
        x: usize,
        weights: Vec<Float>,
    },
    Custom {
        inputs: Vec<usize>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::Upsample2x { .. } => "upsample_nearest2x",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Dense { .. } => "dense",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::MulChannelwise { .. } => "mul_channelwise",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Reshape { .. } => "reshape",
            Op::Sum { .. } => "sum",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Custom { op, .. } => op.name(),
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } | Op::Dense { x, w, b } => vec![*x, *w, *b],
            Op::InstanceNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::MulChannelwise { x, s } => vec![*x, *s],
            Op::Concat { inputs, .. } | Op::Custom { inputs, .. } => inputs.clone(),
            Op::MaxPool2d { x, .. }
            | Op::Upsample2x { x }
            | Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::Softmax { x, .. }
            | Op::GlobalAvgPool { x }
            | Op::Scale { x, .. }
            | Op::Narrow { x, .. }
            | Op::Reshape { x }
            | Op::Sum { x }
            | Op::WeightedSum { x, .. } => vec![*x],
        }
    }
}

pub(super) struct Node {
    pub(super) value: Tensor,
    pub(super) op: Op,
    pub(super) requires_grad: bool,
}

/// Records forward operations and replays them in reverse.
///
/// A tape is single-owner. Gradients accumulate (sum) into each tracked node;
/// a second `backward` without [`Tape::reset_grads`] is rejected.
#[derive(Default)]
pub struct Tape {
    pub(super) nodes: Vec<Node>,
    grads: Vec<Option<Vec<Float>>>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a tensor that does not require gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records a gradient-tracked input.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).unwrap())
    }

    pub fn grad_data(&self, v: Var) -> Option<&[Float]> {
        self.grads[v.0].as_deref()
    }

    /// Branch choices of every piecewise op in recording order: the
    /// `input > 0` mask of each relu and the argmax of each maxpool. Two
    /// evaluations with equal signatures lie on the same linear piece.
    pub fn kink_signature(&self) -> Vec<u32> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => sig.extend(self.nodes[*x].value.data().iter().map(|&v| (v > 0.0) as u32)),
                Op::MaxPool2d { argmax, .. } => sig.extend_from_slice(argmax),
                _ => {}
            }
        }
        sig
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Name of the op that produced `v` (`"leaf"` for inputs).
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    pub(super) fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        let name = op.name();
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an externally defined op whose forward value was computed by
    /// the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.iter().map(|v| v.0).collect(),
                op,
            },
        )
    }

    /// Backpropagates from the scalar `loss`, filling gradients of every
    /// tracked node that influences it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let seed = vec![1.0; 1];
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_with(loss, seed)
    }

    /// Backpropagates an explicit upstream gradient for `output`.
    pub fn backward_with(&mut self, output: Var, seed: Vec<Float>) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        if self.nodes.iter().all(|n| matches!(n.op, Op::Leaf)) {
            return Err(Error::Backward("tape holds no recorded operations".into()));
        }
        if seed.len() != self.nodes[output.0].value.len() {
            return Err(Error::Backward("seed gradient size differs from output".into()));
        }
        self.backward_done = true;
        accumulate(&mut self.grads[output.0], seed);

        for i in (0..=output.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let contributions = self.node_backward(i, &g);
            self.grads[i] = Some(g);
            for (j, gj) in contributions {
                if self.nodes[j].requires_grad {
                    accumulate(&mut self.grads[j], gj);
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[Float]) -> Vec<(usize, Vec<Float>)> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let need = |j: usize| self.nodes[j].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, spec } => {
                let (dx, dw, db) =
                    super::conv::conv2d_backward(val(*x), val(*w), *spec, g, need(*x), need(*w));
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = dw {
                    out.push((*w, dw));
                }
                out.push((*b, db));
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = vec![0.0; val(*x).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src as usize] += g[o];
                }
                out.push((*x, dx));
            }
            Op::Upsample2x { x } => out.push((*x, super::pool::upsample2x_backward(val(*x), g))),
            Op::Relu { x } => {
                let dx = val(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 })
                    .collect();
                out.push((*x, dx));
            }
            Op::Sigmoid { x } => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gi)| gi * y * (1.0 - y))
                    .collect();
                out.push((*x, dx));
            }
            Op::Softmax { x, axis } => {
                out.push((*x, super::elementwise::softmax_backward(&node.value, *axis, g)))
            }
            Op::GlobalAvgPool { x } => {
                let [n, c, h, w] = val(*x).dims4("global_avg_pool").unwrap();
                let hw = h * w;
                let inv = 1.0 / hw as Float;
                let mut dx = vec![0.0; n * c * hw];
                for (nc, chunk) in dx.chunks_mut(hw).enumerate() {
                    chunk.fill(g[nc] * inv);
                }
                out.push((*x, dx));
            }
            Op::Dense { x, w, b } => {
                let (dx, dw, db) = super::elementwise::dense_backward(val(*x), val(*w), g);
                out.push((*x, dx));
                out.push((*w, dw));
                out.push((*b, db));
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (dx, dg, db) =
                    super::norm::instance_norm_backward(val(*x), val(*gamma), xhat, inv_std, g);
                out.push((*x, dx));
                out.push((*gamma, dg));
                out.push((*beta, db));
            }
            Op::Add { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Mul { a, b } => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                out.push((*a, g.iter().zip(vb).map(|(gi, bi)| gi * bi).collect()));
                out.push((*b, g.iter().zip(va).map(|(gi, ai)| gi * ai).collect()));
            }
            Op::Scale { x, factor } => out.push((*x, g.iter().map(|gi| gi * factor).collect())),
            Op::MulChannelwise { x, s } => {
                let (dx, ds) = super::elementwise::mul_channelwise_backward(val(*x), val(*s), g);
                out.push((*x, dx));
                out.push((*s, ds));
            }
            Op::Concat { inputs, axis } => {
                let shapes: Vec<&[usize]> = inputs.iter().map(|&j| val(j).shape()).collect();
                for (j, dj) in inputs
                    .iter()
                    .zip(super::shape_ops::concat_backward(&shapes, *axis, g))
                {
                    out.push((*j, dj));
                }
            }
            Op::Narrow { x, axis, start } => out.push((
                *x,
                super::shape_ops::narrow_backward(val(*x).shape(), node.value.shape(), *axis, *start, g),
            )),
            Op::Reshape { x } => out.push((*x, g.to_vec())),
            Op::Sum { x } => out.push((*x, vec![g[0]; val(*x).len()])),
            Op::WeightedSum { x, weights } => {
                out.push((*x, weights.iter().map(|w| w * g[0]).collect()))
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&j| val(j)).collect();
                for (j, dj) in inputs.iter().zip(op.backward(&ins, &node.value, g)) {
                    if let Some(dj) = dj {
                        out.push((*j, dj));
                    }
                }
            }
        }
        out
    }
}

fn accumulate(slot: &mut Option<Vec<Float>>, g: Vec<Float>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}
