use super::tape::{Op, Tape, Var};
use super::{Float, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: Float = 1e-5;

pub(super) fn instance_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    xhat: &[Float],
    inv_std: &[Float],
    g: &[Float],
) -> (Vec<Float>, Vec<Float>, Vec<Float>) {
    let [n, c, h, w] = x.dims4("instance_norm").unwrap();
    let m = h * w;
    let mut dx = vec![0.0; n * c * m];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            let nc = s * c + ch;
            let range = nc * m..(nc + 1) * m;
            let (gp, xp) = (&g[range.clone()], &xhat[range.clone()]);
            let mut sum_g = 0.0f64;
            let mut sum_gx = 0.0f64;
            for (&gi, &xi) in gp.iter().zip(xp) {
                sum_g += gi as f64;
                sum_gx += gi as f64 * xi as f64;
            }
            dgamma[ch] += sum_gx as Float;
            dbeta[ch] += sum_g as Float;
            // dx = gamma * inv_std / m * (m*g - sum(g) - xhat*sum(g*xhat))
            let k = gamma.data()[ch] as f64 * inv_std[nc] as f64 / m as f64;
            for ((d, &gi), &xi) in dx[range].iter_mut().zip(gp).zip(xp) {
                *d = (k * (m as f64 * gi as f64 - sum_g - xi as f64 * sum_gx)) as Float;
            }
        }
    }
    (dx, dgamma, dbeta)
}

impl Tape {
    /// Per-sample, per-channel standardization followed by `gamma * x + beta`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: Float) -> Result<Var> {
        let (xt, gt, bt) = (self.value(x), self.value(gamma), self.value(beta));
        let [n, c, h, w] = xt.dims4("instance_norm")?;
        if gt.shape() != [c] || bt.shape() != [c] {
            return Err(Error::shape(
                "instance_norm",
                format!(
                    "gamma {:?} / beta {:?} must both be [{c}]",
                    gt.shape(),
                    bt.shape()
                ),
            ));
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Invalid(format!("instance_norm eps must be > 0, got {eps}")));
        }
        let m = h * w;
        let mut xhat = vec![0.0; n * c * m];
        let mut inv_std = vec![0.0; n * c];
        let mut out = vec![0.0; n * c * m];
        for nc in 0..n * c {
            let ch = nc % c;
            let plane = &xt.data()[nc * m..(nc + 1) * m];
            let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / m as f64;
            let var = plane
                .iter()
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
                / m as f64;
            let istd = 1.0 / (var + eps as f64).sqrt();
            inv_std[nc] = istd as Float;
            let (gv, bv) = (gt.data()[ch], bt.data()[ch]);
            for i in 0..m {
                let xh = ((plane[i] as f64 - mean) * istd) as Float;
                xhat[nc * m + i] = xh;
                out[nc * m + i] = gv * xh + bv;
            }
        }
        let out = Tensor::new(vec![n, c, h, w], out)?;
        self.push(
            out,
            Op::InstanceNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
        )
    }
}
