//! Segmentation loss: `0.5 * weighted CE + 0.5 * (1 - mean soft Dice)` where
//! the Dice mean runs over the foreground classes `1..C`.

use crate::error::{Error, Result};
use crate::tensor::{softmax_values, CustomOp, Float, Tape, Tensor, Var};

/// Additive smoothing in the soft Dice numerator and denominator.
pub const SOFT_DICE_SMOOTH: f64 = 1.0;

struct Stats {
    probs: Tensor,
    weight_total: f64,
    intersection: Vec<f64>,
    denom: Vec<f64>,
    ce: f64,
    dice_term: f64,
}

fn validate(logits: &Tensor, targets: &[u8], class_weights: &[Float]) -> Result<[usize; 4]> {
    let [n, c, h, w] = logits.dims4("segmentation_loss")?;
    if targets.len() != n * h * w {
        return Err(Error::shape(
            "segmentation_loss",
            format!("{} targets for {n}x{h}x{w} pixels", targets.len()),
        ));
    }
    if class_weights.len() != c {
        return Err(Error::shape(
            "segmentation_loss",
            format!("{} class weights for {c} classes", class_weights.len()),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= c) {
        return Err(Error::Invalid(format!(
            "target label {bad} out of range for {c} classes"
        )));
    }
    if c < 2 {
        return Err(Error::shape("segmentation_loss", "need at least two classes"));
    }
    Ok([n, c, h, w])
}

fn stats(logits: &Tensor, targets: &[u8], class_weights: &[Float]) -> Result<Stats> {
    let [n, c, h, w] = validate(logits, targets, class_weights)?;
    let hw = h * w;
    let probs = softmax_values(logits, 1);
    let pd = probs.data();
    let mut weight_total = 0.0;
    let mut ce_sum = 0.0;
    let mut intersection = vec![0.0; c];
    let mut psum = vec![0.0; c];
    let mut gsum = vec![0.0; c];
    for s in 0..n {
        for q in 0..hw {
            let t = targets[s * hw + q] as usize;
            let wt = class_weights[t] as f64;
            let pt = pd[(s * c + t) * hw + q] as f64;
            weight_total += wt;
            ce_sum -= wt * pt.max(1e-30).ln();
            gsum[t] += 1.0;
            intersection[t] += pt;
            for k in 0..c {
                psum[k] += pd[(s * c + k) * hw + q] as f64;
            }
        }
    }
    let denom: Vec<f64> = psum.iter().zip(&gsum).map(|(p, g)| p + g).collect();
    let dice_mean = (1..c)
        .map(|k| (2.0 * intersection[k] + SOFT_DICE_SMOOTH) / (denom[k] + SOFT_DICE_SMOOTH))
        .sum::<f64>()
        / (c - 1) as f64;
    Ok(Stats {
        probs,
        weight_total,
        intersection,
        denom,
        ce: if weight_total > 0.0 { ce_sum / weight_total } else { 0.0 },
        dice_term: 1.0 - dice_mean,
    })
}

/// `(cross_entropy, 1 - mean_soft_dice)` without touching a tape.
pub fn loss_terms(logits: &Tensor, targets: &[u8], class_weights: &[Float]) -> Result<(f64, f64)> {
    let s = stats(logits, targets, class_weights)?;
    Ok((s.ce, s.dice_term))
}

struct SegLossOp {
    stats: Stats,
    targets: Vec<u8>,
    class_weights: Vec<Float>,
}

impl CustomOp for SegLossOp {
    fn name(&self) -> &'static str {
        "segmentation_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, out_grad: &[Float]) -> Vec<Option<Vec<Float>>> {
        let [n, c, h, w] = inputs[0].dims4("segmentation_loss").unwrap();
        let hw = h * w;
        let st = &self.stats;
        let pd = st.probs.data();
        let upstream = out_grad[0] as f64;
        let fg = (c - 1) as f64;
        // d(dice_term)/dp_k = -(1/fg) * (2 g_k / D_k - (2 I_k + s) / D_k^2) for k >= 1
        let d_over: Vec<f64> = (0..c).map(|k| st.denom[k] + SOFT_DICE_SMOOTH).collect();
        let num: Vec<f64> = (0..c)
            .map(|k| 2.0 * st.intersection[k] + SOFT_DICE_SMOOTH)
            .collect();
        let mut dz = vec![0.0 as Float; n * c * hw];
        let mut dp = vec![0.0f64; c];
        for s in 0..n {
            for q in 0..hw {
                let t = self.targets[s * hw + q] as usize;
                let ce_scale = if st.weight_total > 0.0 {
                    self.class_weights[t] as f64 / st.weight_total
                } else {
                    0.0
                };
                let p = |k: usize| pd[(s * c + k) * hw + q] as f64;
                let mut dot = 0.0;
                for k in 0..c {
                    dp[k] = if k == 0 {
                        0.0
                    } else {
                        let g = if k == t { 1.0 } else { 0.0 };
                        -(2.0 * g / d_over[k] - num[k] / (d_over[k] * d_over[k])) / fg
                    };
                    dot += p(k) * dp[k];
                }
                for k in 0..c {
                    let pk = p(k);
                    let onehot = if k == t { 1.0 } else { 0.0 };
                    let d_ce = ce_scale * (pk - onehot);
                    let d_dice = pk * (dp[k] - dot);
                    dz[(s * c + k) * hw + q] = (upstream * 0.5 * (d_ce + d_dice)) as Float;
                }
            }
        }
        vec![Some(dz)]
    }
}

/// Records the segmentation loss of `logits[N,C,H,W]` against `targets`
/// (`N*H*W` class indices).
pub fn segmentation_loss(
    tape: &mut Tape,
    logits: Var,
    targets: &[u8],
    class_weights: &[Float],
) -> Result<Var> {
    let stats = stats(tape.value(logits), targets, class_weights)?;
    let value = 0.5 * stats.ce + 0.5 * stats.dice_term;
    tape.custom(
        &[logits],
        Tensor::scalar(value as Float),
        Box::new(SegLossOp {
            stats,
            targets: targets.to_vec(),
            class_weights: class_weights.to_vec(),
        }),
    )
}

/// Per-pixel argmax over the channel axis; ties go to the lowest class.
pub fn predict_labels(logits: &Tensor) -> Result<Vec<u8>> {
    let [n, c, h, w] = logits.dims4("predict_labels")?;
    let hw = h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(n * hw);
    for s in 0..n {
        for q in 0..hw {
            let mut best = 0;
            for k in 1..c {
                if d[(s * c + k) * hw + q] > d[(s * c + best) * hw + q] {
                    best = k;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::finite_diff_check;

    fn logits_with_margin(targets: &[u8], c: usize, hw: usize, margin: Float) -> Tensor {
        let n = targets.len() / hw;
        Tensor::from_fn(&[n, c, 1, hw], |i| {
            let q = i % hw;
            let k = (i / hw) % c;
            let s = i / (hw * c);
            if targets[s * hw + q] as usize == k {
                margin
            } else {
                0.0
            }
        })
    }

    #[test]
    fn saturated_correct_logits_give_tiny_loss() {
        let targets = [0u8, 1, 2, 3, 1, 1, 2, 0];
        let logits = logits_with_margin(&targets, 4, 8, 20.0);
        let mut tape = Tape::new();
        let v = tape.constant(logits);
        let l = segmentation_loss(&mut tape, v, &targets, &[1.0; 4]).unwrap();
        let value = tape.value(l).item();
        assert!(value < 0.01 && value > 0.0, "{value}");
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln4() {
        let targets = [0u8, 1, 0, 1];
        let logits = Tensor::zeros(&[1, 4, 2, 2]);
        let (ce, _) = loss_terms(&logits, &targets, &[1.0; 4]).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-6, "{ce}");
    }

    #[test]
    fn hard_prediction_dice_term_is_small() {
        let targets: Vec<u8> = (0..64).map(|i| (i % 4) as u8).collect();
        let logits = logits_with_margin(&targets, 4, 16, 30.0);
        let (_, dice_term) = loss_terms(&logits, &targets, &[1.0; 4]).unwrap();
        assert!(dice_term < 0.01, "{dice_term}");
    }

    #[test]
    fn rejects_out_of_range_target() {
        let logits = Tensor::zeros(&[1, 4, 1, 2]);
        assert!(loss_terms(&logits, &[0, 4], &[1.0; 4]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let targets: Vec<u8> = (0..2 * 9).map(|i| ((i * 7) % 4) as u8).collect();
        let x = Tensor::from_fn(&[2, 4, 3, 3], |i| (((i * 37) % 19) as Float / 19.0 - 0.5) * 2.0);
        let weights = [0.5, 1.0, 2.0, 1.5];
        let err = finite_diff_check(
            |t, v| segmentation_loss(t, v, &targets, &weights),
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn argmax_tie_breaks_low() {
        let logits = Tensor::new(vec![1, 4, 1, 2], vec![1.0, 0.5, 0.0, 0.5, 0.0, 0.5, 0.0, 0.5]).unwrap();
        assert_eq!(predict_labels(&logits).unwrap(), vec![0, 0]);
        let shifted = Tensor::new(
            vec![1, 4, 1, 2],
            logits.data().iter().map(|v| v + 3.25).collect(),
        )
        .unwrap();
        assert_eq!(predict_labels(&shifted).unwrap(), vec![0, 0]);
    }
}
