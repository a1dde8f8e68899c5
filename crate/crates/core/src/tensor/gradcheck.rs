//! Central finite-difference verification of tape gradients.
//!
//! Non-scalar outputs are reduced to a scalar through a fixed pseudo-random
//! projection `sum_i r_i * y_i`, accumulated in f64, so every output element
//! contributes to the check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Float, Tape, Tensor, Var};
use crate::error::{Error, Result};

const PROJECTION_SEED: u64 = 0x5_eed0_f9ad;

/// Which input elements to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Probe {
    All,
    /// `count` elements drawn uniformly (with replacement) across all inputs.
    Sample { count: usize, seed: u64 },
}

/// `max |analytic - numeric| / max(1, |analytic|, |numeric|)` over every
/// element of `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_multi(|t, v| f(t, v[0]), std::slice::from_ref(x), eps, Probe::All)
}

/// As [`finite_diff_check`], over several inputs. Probes whose stencil
/// changes a relu or maxpool branch are excluded; see [`finite_diff_report`].
pub fn finite_diff_check_multi<F>(f: F, inputs: &[Tensor], eps: f64, probe: Probe) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let report = finite_diff_report(f, inputs, eps, probe)?;
    if report.iter().all(|p| p.at_kink) {
        return Err(Error::Invalid("every finite-difference probe straddles a kink".into()));
    }
    Ok(report
        .iter()
        .filter(|p| !p.at_kink)
        .map(|p| p.rel_err)
        .fold(0.0, f64::max))
}

/// Outcome of one perturbed element.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeResult {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// One-sided differences `(f(x+e)-f(x))/e` and `(f(x)-f(x-e))/e`.
    pub forward: f64,
    pub backward: f64,
    pub rel_err: f64,
    /// `x-e`, `x` and `x+e` do not share one relu/maxpool branch pattern,
    /// so the central difference is not a derivative estimate.
    pub at_kink: bool,
}

/// Per-probe comparison. With [`Probe::Sample`], kink probes are reported
/// but redrawn until `count` smooth probes are collected (at most
/// `16 * count` draws).
pub fn finite_diff_report<F>(f: F, inputs: &[Tensor], eps: f64, probe: Probe) -> Result<Vec<ProbeResult>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let n_out = tape.value(out).len();
    let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
    let weights: Vec<Float> = if n_out == 1 {
        vec![1.0]
    } else {
        (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect()
    };
    let loss = tape.weighted_sum(out, &weights)?;
    tape.backward(loss)?;
    let signature = tape.kink_signature();
    let analytic: Vec<Vec<Float>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            tape.grad_data(*v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let projected = |perturbed: &[Tensor]| -> Result<(f64, Vec<u32>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let y = tape
            .value(out)
            .data()
            .iter()
            .zip(&weights)
            .map(|(&y, &w)| y as f64 * w as f64)
            .sum();
        Ok((y, tape.kink_signature()))
    };
    let (f0, _) = projected(inputs)?;

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut evaluate = |j: usize, k: usize| -> Result<ProbeResult> {
        let orig = inputs[j].data()[k];
        let plus = (orig as f64 + eps) as Float;
        let minus = (orig as f64 - eps) as Float;
        work[j].data_mut()[k] = plus;
        let (fp, sp) = projected(&work)?;
        work[j].data_mut()[k] = minus;
        let (fm, sm) = projected(&work)?;
        work[j].data_mut()[k] = orig;
        let numeric = (fp - fm) / (plus as f64 - minus as f64);
        let a = analytic[j][k] as f64;
        Ok(ProbeResult {
            input: j,
            index: k,
            analytic: a,
            numeric,
            forward: (fp - f0) / (plus as f64 - orig as f64),
            backward: (f0 - fm) / (orig as f64 - minus as f64),
            rel_err: (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs()),
            at_kink: sp != signature || sm != signature,
        })
    };

    let mut out = Vec::new();
    match probe {
        Probe::All => {
            for (j, t) in inputs.iter().enumerate() {
                for k in 0..t.len() {
                    out.push(evaluate(j, k)?);
                }
            }
        }
        Probe::Sample { count, seed } => {
            let total: usize = inputs.iter().map(Tensor::len).sum();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut smooth = 0;
            for _ in 0..16 * count {
                if smooth == count {
                    break;
                }
                let mut flat = rng.random_range(0..total);
                let mut j = 0;
                while flat >= inputs[j].len() {
                    flat -= inputs[j].len();
                    j += 1;
                }
                let p = evaluate(j, flat)?;
                smooth += !p.at_kink as usize;
                out.push(p);
            }
        }
    }
    Ok(out)
}
