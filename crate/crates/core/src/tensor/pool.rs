use super::tape::{Op, Tape, Var};
use super::{Float, Tensor};
use crate::error::{Error, Result};

pub(super) fn upsample2x_backward(x: &Tensor, g: &[Float]) -> Vec<Float> {
    let [n, c, h, w] = x.dims4("upsample_nearest2x").unwrap();
    let ow = 2 * w;
    let mut dx = vec![0.0; n * c * h * w];
    for nc in 0..n * c {
        let src = &g[nc * 4 * h * w..(nc + 1) * 4 * h * w];
        let dst = &mut dx[nc * h * w..(nc + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let top = 2 * y * ow + 2 * xx;
                let bot = top + ow;
                dst[y * w + xx] = src[top] + src[top + 1] + src[bot] + src[bot + 1];
            }
        }
    }
    dx
}

impl Tape {
    /// 2x2 max pooling with stride 2. Ties route the gradient to the first
    /// maximum in row-major window order.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let [n, c, h, w] = xt.dims4("maxpool2d")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "maxpool2d",
                format!("spatial size {h}x{w} must be even; pad or crop the input first"),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let data = xt.data();
        for nc in 0..n * c {
            let base = nc * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let i0 = base + 2 * y * w + 2 * xx;
                    let mut best = i0;
                    for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                        if data[cand] > data[best] {
                            best = cand;
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push(out, Op::MaxPool2d { x: x.0, argmax })
    }

    /// Nearest-neighbour 2x upsampling; each value fills a 2x2 block.
    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let [n, c, h, w] = xt.dims4("upsample_nearest2x")?;
        let ow = 2 * w;
        let mut out = vec![0.0; n * c * 4 * h * w];
        for nc in 0..n * c {
            let src = &xt.data()[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * 4 * h * w..(nc + 1) * 4 * h * w];
            for y in 0..h {
                for xx in 0..w {
                    let v = src[y * w + xx];
                    let top = 2 * y * ow + 2 * xx;
                    dst[top] = v;
                    dst[top + 1] = v;
                    dst[top + ow] = v;
                    dst[top + ow + 1] = v;
                }
            }
        }
        let out = Tensor::new(vec![n, c, 2 * h, 2 * w], out)?;
        self.push(out, Op::Upsample2x { x: x.0 })
    }

    /// Per-channel spatial mean: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let [n, c, h, w] = xt.dims4("global_avg_pool")?;
        if h * w == 0 {
            return Err(Error::shape("global_avg_pool", "empty spatial extent"));
        }
        let out: Vec<Float> = xt
            .data()
            .chunks(h * w)
            .map(|plane| (plane.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64) as Float)
            .collect();
        let out = Tensor::new(vec![n, c], out)?;
        self.push(out, Op::GlobalAvgPool { x: x.0 })
    }
}
