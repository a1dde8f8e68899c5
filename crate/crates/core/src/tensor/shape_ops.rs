use super::elementwise::axis_split;
use super::tape::{Op, Tape, Var};
use super::{Float, Tensor};
use crate::error::{Error, Result};

pub(super) fn concat_backward(shapes: &[&[usize]], axis: usize, g: &[Float]) -> Vec<Vec<Float>> {
    let (outer, _, inner) = axis_split(shapes[0], axis);
    let total: usize = shapes.iter().map(|s| s[axis]).sum();
    let mut grads: Vec<Vec<Float>> = shapes
        .iter()
        .map(|s| Vec::with_capacity(s.iter().product()))
        .collect();
    for o in 0..outer {
        let mut offset = 0;
        for (gi, s) in grads.iter_mut().zip(shapes) {
            let span = s[axis] * inner;
            let start = (o * total) * inner + offset;
            gi.extend_from_slice(&g[start..start + span]);
            offset += span;
        }
    }
    grads
}

pub(super) fn narrow_backward(
    in_shape: &[usize],
    out_shape: &[usize],
    axis: usize,
    start: usize,
    g: &[Float],
) -> Vec<Float> {
    let (outer, len, inner) = axis_split(in_shape, axis);
    let take = out_shape[axis];
    let mut dx = vec![0.0; in_shape.iter().product()];
    for o in 0..outer {
        let dst = (o * len + start) * inner;
        let src = o * take * inner;
        dx[dst..dst + take * inner].copy_from_slice(&g[src..src + take * inner]);
    }
    dx
}

impl Tape {
    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for shape {first:?}"),
            ));
        }
        for v in inputs {
            let s = self.value(*v).shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} is incompatible with {first:?} along axis {axis}"),
                ));
            }
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let total: usize = inputs.iter().map(|v| self.value(*v).shape()[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let span = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * span..(o + 1) * span]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(shape, out)?;
        self.push(
            out,
            Op::Concat {
                inputs: inputs.iter().map(|v| v.0).collect(),
                axis,
            },
        )
    }

    /// Channel-axis concatenation of two `[N,C,H,W]` tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).dims4("concat_channels")?;
        self.value(b).dims4("concat_channels")?;
        self.concat(&[a, b], 1)
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xt = self.value(x);
        if axis >= xt.ndim() || start + len > xt.shape()[axis] {
            return Err(Error::shape(
                "narrow",
                format!(
                    "range {start}..{} on axis {axis} exceeds shape {:?}",
                    start + len,
                    xt.shape()
                ),
            ));
        }
        let (outer, full, inner) = axis_split(xt.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            out.extend_from_slice(&xt.data()[s..s + len * inner]);
        }
        let mut shape = xt.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, out)?;
        self.push(
            out,
            Op::Narrow {
                x: x.0,
                axis,
                start,
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape { x: x.0 })
    }
}
