//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. The phantom experiment trains two models for
//! 20 epochs, so expect about an hour on one core.

#![allow(clippy::unnecessary_cast)]

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sk_unet::blocks::{ParamStore, SkBlock};
use sk_unet::metrics::{assd, dice, hausdorff, jaccard, Point};
use sk_unet::network::{checkpoint, hard_dice, predict_labels, train, Model, ModelConfig, Sample, TrainConfig};
use sk_unet::phantom::{generate_patient, patient_spec, PhantomBounds};
use sk_unet::postprocess::{
    connected_components, fill_holes_2d, foreground_components, largest_cc_constraint, Connectivity,
};
use sk_unet::preprocess::{crop_labels, prepare, stack_neighbors};
use sk_unet::tensor::{Float, Tape, Tensor};
use sk_unet::volume::{Dims, LabelVolume, Spacing, LV, LVM, RV};

const GRADCHECK_BUDGET: Duration = Duration::from_secs(120);
const SK_SUM_TOL: f64 = 1e-6;
const DICE_IDENTITY_TOL: f64 = 1e-9;
const PAIR_IDENTITY_TOL: f64 = 0.002;
const DICE_FLOOR: [f64; 3] = [0.90, 0.80, 0.85];
const EXPERIMENT_BUDGET: Duration = Duration::from_secs(45 * 60);
const ABLATION_MARGIN: f64 = 0.01;
const OVERFIT_STEPS: usize = 200;
const OVERFIT_DICE: f64 = 0.95;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn bin(args: &[&str]) -> (Output, Duration) {
    let t = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_sk-unet"))
        .args(args)
        .output()
        .expect("spawn sk-unet");
    (out, t.elapsed())
}

fn tail(out: &Output) -> String {
    let err = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = err.lines().collect();
    lines[lines.len().saturating_sub(5)..].join(" | ")
}

fn gradient_suite() -> Verdict {
    let (out, t) = bin(&["gradcheck", "--full"]);
    let ok = out.status.success() && t < GRADCHECK_BUDGET;
    verdict(ok, format!("exit {:?} in {:.1}s (budget 120s)", out.status.code(), t.as_secs_f64()))
}

fn sk_normalization() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst, mut negative) = (0.0f64, 0usize);
    for i in 0..1000 {
        let c = [8, 16][i % 2];
        let mut store = ParamStore::new();
        let block = SkBlock::new(&mut store, "sk", c, 4, 8, &mut rng).unwrap();
        let (n, h) = (rng.random_range(1..4), rng.random_range(2..9));
        let scale = 10f64.powf(rng.random_range(-2.0..2.0)) as Float;
        let x = Tensor::from_fn(&[n, c, h, h], |_| rng.random_range(-1.0..1.0) * scale);
        let mut tape = Tape::new();
        let p = store.bind_constant(&mut tape);
        let xv = tape.constant(x);
        let t = block.forward_traced(&mut tape, &p, xv).unwrap();
        let (wa, wb) = (tape.value(t.weight_a).data(), tape.value(t.weight_b).data());
        for (a, b) in wa.iter().zip(wb) {
            negative += (*a < 0.0 || *b < 0.0) as usize;
            worst = worst.max((*a as f64 + *b as f64 - 1.0).abs());
        }
    }
    let mut sym = 0.0f64;
    for seed in 0..20 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let block = SkBlock::new(&mut store, "sk", 8, 4, 8, &mut r).unwrap();
        *store.get_mut(block.fc_select_b.weight) = store.get(block.fc_select_a.weight).clone();
        *store.get_mut(block.fc_select_b.bias) = store.get(block.fc_select_a.bias).clone();
        let mut tape = Tape::new();
        let p = store.bind_constant(&mut tape);
        let xv = tape.constant(Tensor::from_fn(&[2, 8, 5, 5], |_| r.random_range(-3.0..3.0)));
        let t = block.forward_traced(&mut tape, &p, xv).unwrap();
        for v in tape.value(t.weight_a).data().iter().chain(tape.value(t.weight_b).data()) {
            sym = sym.max((*v as f64 - 0.5).abs());
        }
    }
    let ok = negative == 0 && worst <= SK_SUM_TOL && sym <= SK_SUM_TOL;
    verdict(
        ok,
        format!("1000 inputs: max |sum-1| {worst:.2e}, {negative} negative; symmetric max |w-0.5| {sym:.2e} (tol 1e-6)"),
    )
}

fn random_points(rng: &mut ChaCha8Rng) -> Vec<Point> {
    let n = rng.random_range(1..=200);
    (0..n)
        .map(|_| [rng.random_range(0.0..80.0), rng.random_range(0.0..120.0), rng.random_range(0.0..120.0)])
        .collect()
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut bad = Vec::new();
    for _ in 0..100 {
        let (a, b) = (random_points(&mut rng), random_points(&mut rng));
        if hausdorff(&a, &b).unwrap() != oracles::brute_hausdorff(&a, &b)
            || assd(&a, &b).unwrap() != oracles::brute_assd(&a, &b)
        {
            bad.push("distance");
        }
    }
    for _ in 0..100 {
        let dims = Dims::new(rng.random_range(1..=8), rng.random_range(1..=16), rng.random_range(1..=16));
        let p = rng.random_range(0.1..0.7);
        let mask: Vec<bool> = (0..dims.len()).map(|_| rng.random_bool(p)).collect();
        for conn in [Connectivity::Four, Connectivity::Eight, Connectivity::Six, Connectivity::TwentySix] {
            let cc = connected_components(&mask, dims, conn);
            if (cc.labels, cc.sizes) != oracles::bfs_components(&mask, dims, conn) {
                bad.push("components");
            }
        }
        let pl = dims.plane();
        for s in 0..dims.slices {
            let m = &mask[s * pl..(s + 1) * pl];
            if fill_holes_2d(m, dims.rows, dims.cols) != oracles::flood_fill_holes(m, dims.rows, dims.cols) {
                bad.push("hole fill");
            }
        }
    }
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..400);
        let a: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let b: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let (d, j) = (dice(&a, &b).unwrap(), jaccard(&a, &b).unwrap());
        worst = worst.max((d - 2.0 * j / (1.0 + j)).abs());
    }
    let pair = (0.922f64 - 2.0 * 0.857 / 1.857).abs();
    bad.dedup();
    let ok = bad.is_empty() && worst <= DICE_IDENTITY_TOL && pair <= PAIR_IDENTITY_TOL;
    verdict(
        ok,
        format!(
            "mismatches {bad:?}; dice identity err {worst:.1e} (tol 1e-9); 0.922 vs 2*0.857/1.857 off by {pair:.4} (tol 0.002)"
        ),
    )
}

fn heart(dims: Dims) -> Vec<u8> {
    let mut l = vec![0u8; dims.len()];
    for s in 0..dims.slices {
        for r in 0..dims.rows {
            for c in 0..dims.cols {
                let d = (r as f64 - 10.0).hypot(c as f64 - 10.0);
                let rv = (r as f64 - 10.0).hypot(c as f64 - 18.0);
                l[dims.index(s, r, c)] = if d <= 4.0 {
                    LV
                } else if d <= 6.0 {
                    LVM
                } else if rv <= 4.0 {
                    RV
                } else {
                    0
                };
            }
        }
    }
    l
}

fn postprocess_contract() -> Verdict {
    let dims = Dims::new(4, 24, 24);
    let mut l = heart(dims);
    let holes = [dims.index(1, 10, 10), dims.index(1, 10, 11), dims.index(3, 9, 9), dims.index(2, 10, 19)];
    let islands = [dims.index(0, 21, 2), dims.index(0, 21, 3), dims.index(3, 1, 22), dims.index(2, 22, 22)];
    for i in holes {
        l[i] = 0;
    }
    l[islands[0]] = RV;
    l[islands[1]] = RV;
    l[islands[2]] = LV;
    l[islands[3]] = LVM;
    let lv = LabelVolume::new("T", Spacing::isotropic(), dims, l).unwrap();
    let (out, _) = largest_cc_constraint(&lv);
    let mut failures = Vec::new();
    if islands.iter().any(|i| out.labels[*i] != 0) {
        failures.push("island kept");
    }
    if holes.iter().any(|i| out.labels[*i] == 0) || out.labels[holes[3]] != RV || out.labels[holes[0]] != LV {
        failures.push("hole not filled");
    }
    if foreground_components(&out) != 1 {
        failures.push("not one component");
    }
    if largest_cc_constraint(&out).0 != out {
        failures.push("not idempotent");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let d = Dims::new(rng.random_range(1..=8), rng.random_range(1..=16), rng.random_range(1..=16));
        let labels = (0..d.len()).map(|_| [0u8, 0, 0, LV, LVM, RV][rng.random_range(0..6)]).collect();
        let v = LabelVolume::new("R", Spacing::isotropic(), d, labels).unwrap();
        let (o, empty) = largest_cc_constraint(&v);
        if !empty && (foreground_components(&o) != 1 || largest_cc_constraint(&o).0 != o) {
            failures.push("random volume");
            break;
        }
    }
    verdict(failures.is_empty(), format!("constructed + 100 random volumes; failures {failures:?}"))
}

fn overfit() -> Verdict {
    let spec = patient_spec(&PhantomBounds::for_size(96), 42, 0).unwrap();
    let p = generate_patient("P001", &spec).unwrap();
    let (z, b, _) = prepare(&p.volumes[0], 96).unwrap();
    let labels = crop_labels(&p.labels, b);
    let picks = [1, z.dims.slices / 2];
    let samples: Vec<Sample> = picks
        .iter()
        .map(|&s| Sample::new(stack_neighbors(&z, s).unwrap(), labels.slice(s).to_vec()).unwrap())
        .collect();
    let cfg = ModelConfig {
        base_width: 8,
        depth: 4,
        ..ModelConfig::default()
    };
    let mut model = Model::build(&cfg).unwrap();
    let tc = TrainConfig {
        lr: 1e-3,
        epochs: OVERFIT_STEPS,
        batch_size: 2,
        seed: 0,
        augment: false,
        ..TrainConfig::default()
    };
    let logs = train(&mut model, &samples, &tc, |_, _| Ok(())).unwrap();
    let mut data = samples[0].image.data().to_vec();
    data.extend_from_slice(samples[1].image.data());
    let x = Tensor::new(vec![2, 3, 96, 96], data).unwrap();
    let pred = predict_labels(&model.infer(&x).unwrap()).unwrap();
    let target: Vec<u8> = samples.iter().flat_map(|s| s.label.clone()).collect();
    let d = hard_dice(&pred, &target, 4);
    let steps = logs.last().map_or(0, |l| l.step);
    verdict(
        d >= OVERFIT_DICE && steps == OVERFIT_STEPS as u64,
        format!("{steps} steps on 2 slices: training dice {d:.4} (floor 0.95)"),
    )
}

struct Run {
    dice: [f64; 3],
    elapsed: Duration,
    error: Option<String>,
}

fn mean_dice(csv: &str) -> Option<[f64; 3]> {
    let mut out = [f64::NAN; 3];
    for line in csv.lines() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() == 4 && f[0] == "mean" && f[2] == "dice" {
            let i = ["lv", "lvm", "rv"].iter().position(|c| *c == f[1])?;
            out[i] = f[3].parse().ok()?;
        }
    }
    out.iter().all(|v| v.is_finite()).then_some(out)
}

const TRAIN_FLAGS: [&str; 12] = [
    "--base-width", "8", "--depth", "4", "--batch", "4", "--lr", "1e-3", "--seed", "0", "--snapshots", "1",
];

fn experiment(root: &Path, data: &Path, name: &str, extra: &[&str]) -> Run {
    let t = Instant::now();
    let ckpt = root.join(name);
    let pred = root.join(format!("pred_{name}"));
    let report = root.join(format!("eval_{name}.csv"));
    let (d, c, p, r) = (data.to_str().unwrap(), ckpt.to_str().unwrap(), pred.to_str().unwrap(), report.to_str().unwrap());
    let val = data.join("val").join("lge");
    let mut train_args = vec!["train", "--data", d, "--out", c, "--epochs", "20"];
    train_args.extend_from_slice(&TRAIN_FLAGS);
    train_args.extend_from_slice(extra);
    let steps: [Vec<&str>; 3] = [
        train_args,
        vec!["infer", "--ckpt", c, "--input", val.to_str().unwrap(), "--output", p, "--no-overlay"],
        vec!["eval", "--pred", p, "--gt", val.to_str().unwrap(), "--report", r],
    ];
    for args in &steps {
        let (out, _) = bin(args);
        if !out.status.success() {
            return Run {
                dice: [f64::NAN; 3],
                elapsed: t.elapsed(),
                error: Some(format!("{} failed: {}", args[0], tail(&out))),
            };
        }
    }
    let csv = std::fs::read_to_string(&report).unwrap_or_default();
    let dice = mean_dice(&csv);
    Run {
        dice: dice.unwrap_or([f64::NAN; 3]),
        elapsed: t.elapsed(),
        error: dice.is_none().then(|| "no mean dice rows in report".into()),
    }
}

/// Retrains for one epoch and compares with the run's epoch-1 snapshot.
fn reproduces(root: &Path, data: &Path, name: &str, extra: &[&str]) -> Result<(), String> {
    let again = root.join(format!("{name}_epoch1"));
    let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out", again.to_str().unwrap(), "--epochs", "1"];
    args.extend_from_slice(&TRAIN_FLAGS);
    args.extend_from_slice(extra);
    let (out, _) = bin(&args);
    if !out.status.success() {
        return Err(format!("{name} rerun failed: {}", tail(&out)));
    }
    let snap = root.join(name).join("epoch_001");
    let sum = |d: &Path| checkpoint::load(d).map(|(m, _)| m.checksum()).map_err(|e| e.to_string());
    let log = |d: &Path| std::fs::read_to_string(d.join(checkpoint::TRAIN_LOG)).map_err(|e| e.to_string());
    if sum(&snap)? != sum(&again)? {
        return Err(format!("{name}: checkpoint differs from rerun"));
    }
    if log(&snap)? != log(&again)? {
        return Err(format!("{name}: training log differs from rerun"));
    }
    Ok(())
}

fn main() {
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut report = |n: usize, name: &'static str, v: Verdict| {
        println!("{} [{n}] {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((n, name, v));
    };
    report(1, "gradient suite", gradient_suite());
    report(2, "SK normalization", sk_normalization());
    report(3, "metric oracles", metric_oracles());
    report(6, "postprocess contract", postprocess_contract());
    report(7, "overfit smoke", overfit());

    let dir = tempfile::tempdir().expect("tempdir");
    let data = dir.path().join("data");
    let t = Instant::now();
    let (gen, _) = bin(&["gen-data", "--out", data.to_str().unwrap(), "--n-train", "60", "--n-val", "10", "--seed", "42", "--size", "96"]);
    let gen_time = t.elapsed();
    if !gen.status.success() {
        let msg = format!("gen-data failed: {}", tail(&gen));
        report(4, "phantom experiment", verdict(false, msg.clone()));
        report(5, "ablation direction", verdict(false, msg));
    } else {
        let sk = experiment(dir.path(), &data, "sk", &[]);
        let total = gen_time + sk.elapsed;
        let [lv, lvm, rv] = sk.dice;
        let floors = lv >= DICE_FLOOR[0] && lvm >= DICE_FLOOR[1] && rv >= DICE_FLOOR[2];
        let order = lv > rv && rv > lvm;
        report(
            4,
            "phantom experiment",
            verdict(
                sk.error.is_none() && floors && order && total <= EXPERIMENT_BUDGET,
                format!(
                    "LGE val dice LV {lv:.4} LVM {lvm:.4} RV {rv:.4} (floors 0.90/0.80/0.85, order LV>RV>LVM {order}); {:.1} min (budget 45){}",
                    total.as_secs_f64() / 60.0,
                    sk.error.as_deref().map(|e| format!("; {e}")).unwrap_or_default()
                ),
            ),
        );
        let plain = experiment(dir.path(), &data, "plain", &["--no-se", "--no-sk"]);
        let fg = |d: [f64; 3]| d.iter().sum::<f64>() / 3.0;
        let (ms, mp) = (fg(sk.dice), fg(plain.dice));
        let repro = reproduces(dir.path(), &data, "sk", &[])
            .and_then(|_| reproduces(dir.path(), &data, "plain", &["--no-se", "--no-sk"]));
        let errs: Vec<String> = [sk.error, plain.error, repro.err()].into_iter().flatten().collect();
        report(
            5,
            "ablation direction",
            verdict(
                errs.is_empty() && mp <= ms + ABLATION_MARGIN,
                format!(
                    "mean fg dice plain {mp:.4} vs SK {ms:.4} (plain <= SK + 0.01); epoch-1 snapshots reproduce: {}{}",
                    errs.is_empty(),
                    if errs.is_empty() { String::new() } else { format!("; {}", errs.join("; ")) }
                ),
            ),
        );
    }

    results.sort_by_key(|r| r.0);
    let failed: Vec<String> = results.iter().filter(|r| !r.2.pass).map(|r| format!("[{}] {}", r.0, r.1)).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
    } else {
        println!("acceptance: FAILED {}", failed.join(", "));
        std::process::exit(1);
    }
}
