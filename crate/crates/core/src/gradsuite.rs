//! Finite-difference verification of every differentiable op, both
//! attention blocks and (optionally) a tiny end-to-end network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{ParamStore, SeResBlock, SkBlock};
use crate::error::Result;
use crate::network::{segmentation_loss, Model, ModelConfig};
use crate::tensor::gradcheck::{finite_diff_report, Probe, ProbeResult};
use crate::tensor::{ConvSpec, Float, Tape, Tensor, Var, DEFAULT_EPS};

pub const TOLERANCE: f64 = 1e-3;
const SEED: u64 = 20_240_607;
/// Central-difference step for every case.
pub const EPS: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    /// Worst error over probes not straddling a kink.
    pub max_rel_err: f64,
    pub probes: usize,
    /// Probes excluded because the stencil crossed a relu/maxpool branch.
    pub kinks: usize,
}

impl CaseResult {
    fn from_probes(name: &'static str, probes: &[ProbeResult]) -> Self {
        let smooth = probes.iter().filter(|p| !p.at_kink);
        CaseResult {
            name,
            max_rel_err: smooth.clone().map(|p| p.rel_err).fold(0.0, f64::max),
            probes: probes.len(),
            kinks: probes.len() - smooth.count(),
        }
    }

    /// Fails as well when no probe was usable.
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE && self.kinks < self.probes
    }
}

/// Uniform values in `[-1, 1]` bounded away from zero by `gap`, so relu
/// kinks stay outside the finite-difference stencil.
fn away_from_zero(shape: &[usize], gap: Float, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m: Float = rng.random_range(gap..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Distinct values on a shuffled grid with spacing `step`; keeps the
/// maxpool argmax stable under perturbation.
fn distinct(shape: &[usize], step: Float, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<Float> = (0..n).map(|i| (i as Float - n as Float / 2.0) * step).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), v).expect("shape matches")
}

type CaseFn = fn(&mut ChaCha8Rng) -> Result<Vec<ProbeResult>>;

fn check(
    inputs: Vec<Tensor>,
    eps: f64,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<Vec<ProbeResult>> {
    finite_diff_report(f, &inputs, eps, Probe::All)
}

fn case_conv2d(rng: &mut ChaCha8Rng) -> Result<Vec<ProbeResult>> {
    let mut all = Vec::new();
    for spec in [ConvSpec::same(3, 1), ConvSpec::same(3, 2), ConvSpec::new(2, 1, 1)] {
        let x = uniform(&[2, 3, 7, 7], rng);
        let w = uniform(&[4, 3, 3, 3], rng);
        let b = uniform(&[4], rng);
        all.extend(check(vec![x, w, b], EPS, |t, v| t.conv2d(v[0], v[1], v[2], spec))?);
    }
    let x = uniform(&[1, 4, 5, 5], rng);
    let w = uniform(&[2, 4, 1, 1], rng);
    let b = uniform(&[2], rng);
    all.extend(check(vec![x, w, b], EPS, |t, v| {
        t.conv2d(v[0], v[1], v[2], ConvSpec::new(1, 0, 1))
    })?);
    Ok(all)
}

fn case_maxpool(rng: &mut ChaCha8Rng) -> Result<Vec<ProbeResult>> {
    let x = distinct(&[2, 2, 6, 6], 0.05, rng);
    check(vec![x], EPS, |t, v| t.maxpool2d(v[0]))
}

fn case_upsample(rng: &mut ChaCha8Rng) -> Result<Vec<ProbeResult>> {
    check(vec![uniform(&[2, 2, 3, 4], rng)], EPS, |t, v| t.upsample_nearest2x(v[0]))
}

fn case_relu(rng: &mut ChaCha8Rng) -> Result<Vec<ProbeResult>> {
    check(vec![away_from_zero(&[3, 17], 0.05, rng)], EPS, |t, v| t.relu(v[0]))
}

fn case_sigmoid(rng: &mut ChaCha8Rng) -> Result<Vec<ProbeResult>> {
    let x = Tensor::from_fn(&[40], |_| rng.random_range(-6.0..6.0));
    check(vec![x], EPS, |t, v| t.sigmoid(v[0]))
}

fn case_softmax(rng: &mut ChaCha8Rng) -> Result<Vec<ProbeResult>> {
    let mut all = Vec::new();
    for axis in 0..3 {
        let x = Tensor::from_fn(&[2, 3, 4], |_| rng.random_range(-3.0..3.0));
        all.extend(check(vec![x], EPS, |t, v| t.softmax(v[0], axis))?);
    }
    Ok(all)
}

fn case_global_avg_pool(rng: &mut ChaCha8Rng) -> Result<Vec<ProbeResult>> {
    check(vec![uniform(&[2, 3, 4, 5], rng)], EPS, |t, v| t.global_avg_pool(v[0]))
}

fn case_dense(rng: &mut ChaCha8Rng) -> Result<Vec<ProbeResult>> {
    let inputs = vec![uniform(&[3, 5], rng), uniform(&[4, 5], rng), uniform(&[4], rng)];
    check(inputs, EPS, |t, v| t.dense(v[0], v[1], v[2]))
}

fn case_instance_norm(rng: &mut ChaCha8Rng) -> Result<Vec<ProbeResult>> {
    let x = Tensor::from_fn(&[2, 3, 4, 4], |_| rng.random_range(-2.0..2.0));
    let g = Tensor::from_fn(&[3], |_| rng.random_range(0.5..1.5));
    let b = uniform(&[3], rng);
    check(vec![x, g, b], EPS, |t, v| t.instance_norm(v[0], v[1], v[2], DEFAULT_EPS))
}

fn case_elementwise(rng: &mut ChaCha8Rng) -> Result<Vec<ProbeResult>> {
    let a = uniform(&[2, 3, 2, 2], rng);
    let b = uniform(&[2, 3, 2, 2], rng);
    let s = uniform(&[2, 3], rng);
    check(vec![a, b, s], EPS, |t, v| {
        let sum = t.add(v[0], v[1])?;
        let prod = t.mul(sum, v[1])?;
        let scaled = t.scale(prod, 0.75)?;
        t.mul_channelwise(scaled, v[2])
    })
}

fn case_shape_ops(rng: &mut ChaCha8Rng) -> Result<Vec<ProbeResult>> {
    let a = uniform(&[2, 2, 3, 3], rng);
    let b = uniform(&[2, 3, 3, 3], rng);
    check(vec![a, b], EPS, |t, v| {
        let c = t.concat_channels(v[0], v[1])?;
        let n = t.narrow(c, 1, 1, 3)?;
        let r = t.reshape(n, &[2, 27])?;
        let c2 = t.concat(&[r, r], 0)?;
        t.sum(c2)
    })
}

fn case_loss(rng: &mut ChaCha8Rng) -> Result<Vec<ProbeResult>> {
    let logits = Tensor::from_fn(&[2, 4, 3, 3], |_| rng.random_range(-2.0..2.0));
    let targets: Vec<u8> = (0..18).map(|_| rng.random_range(0..4)).collect();
    let weights = [0.5, 1.0, 2.0, 1.5];
    check(vec![logits], EPS, move |t, v| segmentation_loss(t, v[0], &targets, &weights))
}

/// Inputs `[x, params...]` of a block built into `store`.
fn block_inputs(x: Tensor, store: &ParamStore) -> Vec<Tensor> {
    std::iter::once(x)
        .chain(store.iter().map(|(_, _, t)| t.clone()))
        .collect()
}

fn case_se_res(rng: &mut ChaCha8Rng) -> Result<Vec<ProbeResult>> {
    let mut store = ParamStore::new();
    let block = SeResBlock::new(&mut store, "se", 4, 4, 8, true, rng)?;
    let x = uniform(&[1, 4, 6, 6], rng);
    finite_diff_report(
        |t, v| block.forward(t, &v[1..], v[0]),
        &block_inputs(x, &store),
        EPS,
        Probe::All,
    )
}

fn case_sk(rng: &mut ChaCha8Rng) -> Result<Vec<ProbeResult>> {
    let mut store = ParamStore::new();
    let block = SkBlock::new(&mut store, "sk", 4, 4, 8, rng)?;
    let x = uniform(&[1, 4, 6, 6], rng);
    finite_diff_report(
        |t, v| block.forward(t, &v[1..], v[0]),
        &block_inputs(x, &store),
        EPS,
        Probe::All,
    )
}

/// Configuration of the tiny end-to-end check.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        base_width: 4,
        depth: 2,
        reduction_ratio: 4,
        seed: 3,
        ..ModelConfig::default()
    }
}

fn case_network(rng: &mut ChaCha8Rng) -> Result<Vec<ProbeResult>> {
    let model = Model::build(&tiny_config())?;
    let x = uniform(&[1, 3, 16, 16], rng);
    let targets: Vec<u8> = (0..256).map(|_| rng.random_range(0..4)).collect();
    let weights = [1.0; 4];
    finite_diff_report(
        |t, v| {
            let logits = model.forward(t, &v[1..], v[0])?;
            segmentation_loss(t, logits, &targets, &weights)
        },
        &block_inputs(x, &model.params),
        EPS,
        Probe::Sample { count: 32, seed: SEED + 2 },
    )
}

const CASES: [(&str, CaseFn); 13] = [
    ("conv2d", case_conv2d),
    ("maxpool2d", case_maxpool),
    ("upsample_nearest2x", case_upsample),
    ("relu", case_relu),
    ("sigmoid", case_sigmoid),
    ("softmax", case_softmax),
    ("global_avg_pool", case_global_avg_pool),
    ("dense", case_dense),
    ("instance_norm", case_instance_norm),
    ("add_mul_scale_channelwise", case_elementwise),
    ("concat_narrow_reshape_sum", case_shape_ops),
    ("segmentation_loss", case_loss),
    ("se_res_block", case_se_res),
];

/// Runs every case (plus the SK block, and the network when `full`).
pub fn run(full: bool) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut cases: Vec<(&'static str, CaseFn)> = CASES.to_vec();
    cases.push(("sk_block", case_sk));
    if full {
        cases.push(("network", case_network));
    }
    cases
        .into_iter()
        .map(|(name, f)| Ok(CaseResult::from_probes(name, &f(&mut rng)?)))
        .collect()
}

pub fn render(results: &[CaseResult]) -> String {
    let mut s = format!("{:<28}{:>14}{:>8}{:>7}  status\n", "op", "max_rel_err", "probes", "kinks");
    for r in results {
        s.push_str(&format!(
            "{:<28}{:>14.3e}{:>8}{:>7}  {}\n",
            r.name,
            r.max_rel_err,
            r.probes,
            r.kinks,
            if r.passed() { "ok" } else { "FAIL" }
        ));
    }
    s
}
