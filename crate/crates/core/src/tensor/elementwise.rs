use super::gemm::{gemm, MatRef};
use super::tape::{Op, Tape, Var};
use super::{Float, Tensor};
use crate::error::{Error, Result};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

#[inline]
pub(crate) fn sigmoid(v: Float) -> Float {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub(super) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(super) fn softmax_backward(y: &Tensor, axis: usize, g: &[Float]) -> Vec<Float> {
    let (outer, len, inner) = axis_split(y.shape(), axis);
    let yd = y.data();
    let mut dx = vec![0.0; yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let dot: f64 = (0..len).map(|k| g[idx(k)] as f64 * yd[idx(k)] as f64).sum();
            for k in 0..len {
                dx[idx(k)] = yd[idx(k)] * (g[idx(k)] - dot as Float);
            }
        }
    }
    dx
}

pub(super) fn dense_backward(x: &Tensor, w: &Tensor, g: &[Float]) -> (Vec<Float>, Vec<Float>, Vec<Float>) {
    let [n, cin] = x.dims2("dense").unwrap();
    let cout = w.shape()[0];
    let mut dx = vec![0.0; n * cin];
    gemm(
        n,
        cout,
        cin,
        1.0,
        MatRef::row_major(g, cout),
        MatRef::row_major(w.data(), cin),
        0.0,
        &mut dx,
    );
    let mut dw = vec![0.0; cout * cin];
    gemm(
        cout,
        n,
        cin,
        1.0,
        MatRef::transposed(g, cout),
        MatRef::row_major(x.data(), cin),
        0.0,
        &mut dw,
    );
    let mut db = vec![0.0; cout];
    for row in g.chunks(cout) {
        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
    }
    (dx, dw, db)
}

pub(super) fn mul_channelwise_backward(x: &Tensor, s: &Tensor, g: &[Float]) -> (Vec<Float>, Vec<Float>) {
    let [n, c, h, w] = x.dims4("mul_channelwise").unwrap();
    let hw = h * w;
    let mut dx = vec![0.0; n * c * hw];
    let mut ds = vec![0.0; n * c];
    for nc in 0..n * c {
        let sv = s.data()[nc];
        let gp = &g[nc * hw..(nc + 1) * hw];
        let xp = &x.data()[nc * hw..(nc + 1) * hw];
        let mut acc = 0.0f64;
        for ((d, &gi), &xi) in dx[nc * hw..(nc + 1) * hw].iter_mut().zip(gp).zip(xp) {
            *d = gi * sv;
            acc += gi as f64 * xi as f64;
        }
        ds[nc] = acc as Float;
    }
    (dx, ds)
}

impl Tape {
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, |v| v.max(0.0));
        self.push(out, Op::Relu { x: x.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, sigmoid);
        self.push(out, Op::Sigmoid { x: x.0 })
    }

    fn map(&self, x: Var, f: impl Fn(Float) -> Float) -> Tensor {
        let xt = self.value(x);
        Tensor::new(xt.shape().to_vec(), xt.data().iter().map(|&v| f(v)).collect()).unwrap()
    }

    /// Softmax along `axis`, stabilized by subtracting the running max.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xt = self.value(x);
        if axis >= xt.ndim() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for shape {:?}", xt.shape()),
            ));
        }
        let out = softmax_values(xt, axis);
        self.push(out, Op::Softmax { x: x.0, axis })
    }

    /// `x[N,Cin] · w[Cout,Cin]^T + b[Cout]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        let [n, cin] = xt.dims2("dense")?;
        let [cout, wcin] = wt.dims2("dense")?;
        if wcin != cin {
            return Err(Error::shape(
                "dense",
                format!("inner dimension mismatch: input has {cin} features, weight expects {wcin}"),
            ));
        }
        if bt.shape() != [cout] {
            return Err(Error::shape(
                "dense",
                format!("bias shape {:?} does not match {cout} outputs", bt.shape()),
            ));
        }
        let mut out: Vec<Float> = (0..n).flat_map(|_| bt.data().iter().copied()).collect();
        gemm(
            n,
            cin,
            cout,
            1.0,
            MatRef::row_major(xt.data(), cin),
            MatRef::transposed(wt.data(), cin),
            1.0,
            &mut out,
        );
        let out = Tensor::new(vec![n, cout], out)?;
        self.push(
            out,
            Op::Dense {
                x: x.0,
                w: w.0,
                b: b.0,
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        same_shape("add", at, bt)?;
        let out = Tensor::new(
            at.shape().to_vec(),
            at.data().iter().zip(bt.data()).map(|(x, y)| x + y).collect(),
        )?;
        self.push(out, Op::Add { a: a.0, b: b.0 })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        same_shape("mul", at, bt)?;
        let out = Tensor::new(
            at.shape().to_vec(),
            at.data().iter().zip(bt.data()).map(|(x, y)| x * y).collect(),
        )?;
        self.push(out, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, x: Var, factor: Float) -> Result<Var> {
        let out = self.map(x, |v| v * factor);
        self.push(out, Op::Scale { x: x.0, factor })
    }

    /// Scales channel `c` of sample `n` by `s[n, c]`.
    pub fn mul_channelwise(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xt, st) = (self.value(x), self.value(s));
        let [n, c, h, w] = xt.dims4("mul_channelwise")?;
        if st.shape() != [n, c] {
            return Err(Error::shape(
                "mul_channelwise",
                format!("scale shape {:?} does not match [{n}, {c}]", st.shape()),
            ));
        }
        let hw = h * w;
        let mut out = xt.data().to_vec();
        for (nc, plane) in out.chunks_mut(hw).enumerate() {
            let sv = st.data()[nc];
            plane.iter_mut().for_each(|v| *v *= sv);
        }
        let out = Tensor::new(vec![n, c, h, w], out)?;
        self.push(out, Op::MulChannelwise { x: x.0, s: s.0 })
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as Float), Op::Sum { x: x.0 })
    }

    /// `sum_i weights[i] * x[i]` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: &[Float]) -> Result<Var> {
        let xt = self.value(x);
        if weights.len() != xt.len() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} weights for {} elements", weights.len(), xt.len()),
            ));
        }
        let s: f64 = xt
            .data()
            .iter()
            .zip(weights)
            .map(|(&v, &w)| v as f64 * w as f64)
            .sum();
        self.push(
            Tensor::scalar(s as Float),
            Op::WeightedSum {
                x: x.0,
                weights: weights.to_vec(),
            },
        )
    }
}

/// Numerically stable softmax along `axis` (no tape involvement).
pub fn softmax_values(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let m = (0..len).map(|k| xd[idx(k)]).fold(Float::NEG_INFINITY, Float::max);
            let mut total = 0.0f64;
            for k in 0..len {
                let e = ((xd[idx(k)] - m) as f64).exp();
                out[idx(k)] = e as Float;
                total += e;
            }
            for k in 0..len {
                out[idx(k)] = (out[idx(k)] as f64 / total) as Float;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}
