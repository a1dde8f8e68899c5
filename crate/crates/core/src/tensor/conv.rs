//! 2-D cross-correlation with zero padding, lowered to GEMM per sample.

use std::sync::atomic::{AtomicBool, Ordering};

use super::gemm::{gemm, MatRef};
use super::tape::{Op, Tape, Var};
use super::{Float, Tensor};
use crate::error::{Error, Result};

static CONV_BACKWARD_FAULT: AtomicBool = AtomicBool::new(false);

/// Corrupts the weight gradient of every subsequent conv backward. Used only
/// to demonstrate that the gradient checker catches a broken kernel.
pub fn set_conv_backward_fault(on: bool) {
    CONV_BACKWARD_FAULT.store(on, Ordering::SeqCst);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
        }
    }

    /// Stride 1 with the padding that preserves spatial size for `k x k`.
    pub const fn same(k: usize, dilation: usize) -> Self {
        Self::new(1, dilation * (k - 1) / 2, dilation)
    }

    fn out_dim(&self, len: usize, k: usize, axis: &str) -> Result<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = len + 2 * self.padding;
        if padded < span {
            return Err(Error::shape(
                "conv2d",
                format!("{axis}: padded extent {padded} is smaller than the kernel span {span}"),
            ));
        }
        if !(padded - span).is_multiple_of(self.stride) {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "{axis}: ({padded} - {span}) is not divisible by stride {}",
                    self.stride
                ),
            ));
        }
        Ok((padded - span) / self.stride + 1)
    }
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: ConvSpec,
}

impl Geometry {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec == ConvSpec::new(1, 0, 1)
    }

    /// Input offset along one axis (may be out of bounds: padding).
    #[inline]
    fn src(&self, o: usize, k: usize) -> isize {
        (o * self.spec.stride + k * self.spec.dilation) as isize - self.spec.padding as isize
    }

    /// Output positions `lo..hi` along an axis of length `len` whose source
    /// index for kernel tap `k` falls inside the input.
    #[inline]
    fn valid_range(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.spec.stride as isize;
        let off = (k * self.spec.dilation) as isize - self.spec.padding as isize;
        // need 0 <= o*s + off < len
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = if (len as isize - off) <= 0 {
            0
        } else {
            (len as isize - off + s - 1) / s
        };
        let lo = lo.clamp(0, out_len as isize) as usize;
        let hi = hi.clamp(0, out_len as isize) as usize;
        (lo, hi.max(lo))
    }

    fn im2col(&self, x: &[Float], cols: &mut [Float]) {
        let p = self.p();
        let stride = self.spec.stride;
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                let (ylo, yhi) = self.valid_range(ki, self.h, self.oh);
                for kj in 0..self.kw {
                    let (xlo, xhi) = self.valid_range(kj, self.w, self.ow);
                    let row = ((ci * self.kh + ki) * self.kw + kj) * p;
                    let dst = &mut cols[row..row + p];
                    dst[..ylo * self.ow].fill(0.0);
                    dst[yhi * self.ow..].fill(0.0);
                    for oy in ylo..yhi {
                        let iy = self.src(oy, ki) as usize;
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        let src_row = &plane[iy * self.w..(iy + 1) * self.w];
                        line[..xlo].fill(0.0);
                        line[xhi..].fill(0.0);
                        if xhi > xlo {
                            let ix0 = self.src(xlo, kj) as usize;
                            if stride == 1 {
                                line[xlo..xhi].copy_from_slice(&src_row[ix0..ix0 + (xhi - xlo)]);
                            } else {
                                for (i, d) in line[xlo..xhi].iter_mut().enumerate() {
                                    *d = src_row[ix0 + i * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[Float], dx: &mut [Float]) {
        let p = self.p();
        let stride = self.spec.stride;
        for ci in 0..self.cin {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                let (ylo, yhi) = self.valid_range(ki, self.h, self.oh);
                for kj in 0..self.kw {
                    let (xlo, xhi) = self.valid_range(kj, self.w, self.ow);
                    if xhi <= xlo {
                        continue;
                    }
                    let row = ((ci * self.kh + ki) * self.kw + kj) * p;
                    let src = &cols[row..row + p];
                    let ix0 = self.src(xlo, kj) as usize;
                    for oy in ylo..yhi {
                        let iy = self.src(oy, ki) as usize;
                        let dst_row = &mut plane[iy * self.w..(iy + 1) * self.w];
                        let line = &src[oy * self.ow + xlo..oy * self.ow + xhi];
                        if stride == 1 {
                            dst_row[ix0..ix0 + line.len()]
                                .iter_mut()
                                .zip(line)
                                .for_each(|(d, v)| *d += v);
                        } else {
                            for (i, v) in line.iter().enumerate() {
                                dst_row[ix0 + i * stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn geometry(x: &Tensor, w: &Tensor, b: &Tensor, spec: ConvSpec) -> Result<(usize, usize, Geometry)> {
    let [n, cin, h, wd] = x.dims4("conv2d")?;
    let [cout, wcin, kh, kw] = w.dims4("conv2d")?;
    if wcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels but weight expects {wcin} (dimension 1)"),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be odd-sized, got {kh}x{kw}"),
        ));
    }
    if b.shape() != [cout] {
        return Err(Error::shape(
            "conv2d",
            format!("bias shape {:?} does not match {cout} output channels", b.shape()),
        ));
    }
    if spec.stride == 0 || spec.dilation == 0 {
        return Err(Error::shape("conv2d", "stride and dilation must be >= 1"));
    }
    let oh = spec.out_dim(h, kh, "height")?;
    let ow = spec.out_dim(wd, kw, "width")?;
    Ok((
        n,
        cout,
        Geometry {
            cin,
            h,
            w: wd,
            kh,
            kw,
            oh,
            ow,
            spec,
        },
    ))
}

pub(super) fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, spec: ConvSpec) -> Result<Tensor> {
    let (n, cout, g) = geometry(x, w, b, spec)?;
    let (k, p) = (g.k(), g.p());
    let in_len = g.cin * g.h * g.w;
    let mut out = vec![0.0; n * cout * p];
    let mut cols = if g.is_pointwise() { vec![] } else { vec![0.0; k * p] };
    for s in 0..n {
        let xs = &x.data()[s * in_len..(s + 1) * in_len];
        let ys = &mut out[s * cout * p..(s + 1) * cout * p];
        for (co, row) in ys.chunks_mut(p).enumerate() {
            row.fill(b.data()[co]);
        }
        let colref = if g.is_pointwise() {
            xs
        } else {
            g.im2col(xs, &mut cols);
            &cols
        };
        gemm(
            cout,
            k,
            p,
            1.0,
            MatRef::row_major(w.data(), k),
            MatRef::row_major(colref, p),
            1.0,
            ys,
        );
    }
    Tensor::new(vec![n, cout, g.oh, g.ow], out)
}

/// Returns `(dx, dw, db)`; `dx`/`dw` are skipped when not required.
pub(super) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    spec: ConvSpec,
    gout: &[Float],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<Float>>, Option<Vec<Float>>, Vec<Float>) {
    let cout = w.shape()[0];
    let b = Tensor::zeros(&[cout]);
    let (n, _, g) = geometry(x, w, &b, spec).expect("shapes validated in forward");
    let (k, p) = (g.k(), g.p());
    let in_len = g.cin * g.h * g.w;

    let mut db = vec![0.0; cout];
    for s in 0..n {
        for co in 0..cout {
            let row = &gout[(s * cout + co) * p..(s * cout + co + 1) * p];
            db[co] += row.iter().copied().sum::<Float>();
        }
    }

    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    let mut dw = need_dw.then(|| vec![0.0; w.len()]);
    let mut cols = vec![0.0; if g.is_pointwise() && !need_dx { 0 } else { k * p }];
    for s in 0..n {
        let xs = &x.data()[s * in_len..(s + 1) * in_len];
        let gs = &gout[s * cout * p..(s + 1) * cout * p];
        if let Some(dw) = dw.as_mut() {
            let colref: &[Float] = if g.is_pointwise() {
                xs
            } else {
                g.im2col(xs, &mut cols);
                &cols
            };
            // dW[cout x k] += dY[cout x p] · cols^T[p x k]
            gemm(
                cout,
                p,
                k,
                1.0,
                MatRef::row_major(gs, p),
                MatRef::transposed(colref, p),
                1.0,
                dw,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * in_len..(s + 1) * in_len];
            if g.is_pointwise() {
                gemm(
                    k,
                    cout,
                    p,
                    1.0,
                    MatRef::transposed(w.data(), k),
                    MatRef::row_major(gs, p),
                    1.0,
                    dxs,
                );
            } else {
                // dcols[k x p] = W^T[k x cout] · dY[cout x p]
                gemm(
                    k,
                    cout,
                    p,
                    1.0,
                    MatRef::transposed(w.data(), k),
                    MatRef::row_major(gs, p),
                    0.0,
                    &mut cols,
                );
                g.col2im(&cols, dxs);
            }
        }
    }
    if CONV_BACKWARD_FAULT.load(Ordering::SeqCst) {
        if let Some(dw) = dw.as_mut() {
            dw.iter_mut().for_each(|v| *v *= 1.5);
        }
    }
    (dx, dw, db)
}

impl Tape {
    /// Cross-correlation of `x[N,Cin,H,W]` with `w[Cout,Cin,kh,kw]` plus `b[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let out = conv2d_forward(self.value(x), self.value(w), self.value(b), spec)?;
        self.push(
            out,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                spec,
            },
        )
    }
}
