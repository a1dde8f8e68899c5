#![allow(clippy::unnecessary_cast)]

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sk_unet::blocks::{ParamStore, SeResBlock, SkBlock};
use sk_unet::tensor::{Float, Tape, Tensor};

fn random(shape: &[usize], lo: Float, hi: Float, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn sk(channels: usize, seed: u64) -> (SkBlock, ParamStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let b = SkBlock::new(&mut store, "sk", channels, 4, 8, &mut rng).unwrap();
    (b, store)
}

fn se(channels: usize, gated: bool, seed: u64) -> (SeResBlock, ParamStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let b = SeResBlock::new(&mut store, "se", channels, 4, 8, gated, &mut rng).unwrap();
    (b, store)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sk_output_is_convex_combination(seed in any::<u64>(), n in 1usize..3, hw in 2usize..7) {
        let (block, store) = sk(8, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let mut tape = Tape::new();
        let p = store.bind_constant(&mut tape);
        let x = tape.constant(random(&[n, 8, hw, hw], -2.0, 2.0, &mut rng));
        let t = block.forward_traced(&mut tape, &p, x).unwrap();
        let (ua, ub, out) = (tape.value(t.branch_a), tape.value(t.branch_b), tape.value(t.output));
        prop_assert_eq!(out.shape(), &[n, 8, hw, hw][..]);
        for i in 0..out.len() {
            let (a, b, o) = (ua.data()[i], ub.data()[i], out.data()[i]);
            let slack = 1e-5 * (1.0 + a.abs().max(b.abs()));
            prop_assert!(o >= a.min(b) - slack && o <= a.max(b) + slack, "{o} outside [{a}, {b}]");
        }
        let (wa, wb) = (tape.value(t.weight_a), tape.value(t.weight_b));
        for i in 0..wa.len() {
            prop_assert!(wa.data()[i] >= 0.0 && wb.data()[i] >= 0.0);
            prop_assert!(((wa.data()[i] + wb.data()[i]) as f64 - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn se_gate_is_strictly_inside_unit_interval(seed in any::<u64>()) {
        let (block, store) = se(8, true, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let mut tape = Tape::new();
        let p = store.bind_constant(&mut tape);
        let x = tape.constant(random(&[2, 8, 5, 5], -1.0, 1.0, &mut rng));
        let t = block.forward_traced(&mut tape, &p, x).unwrap();
        let s = tape.value(t.gate.unwrap());
        prop_assert_eq!(s.shape(), &[2, 8][..]);
        prop_assert!(s.data().iter().all(|v| *v > 0.0 && *v < 1.0));
        prop_assert_eq!(tape.value(t.output).shape(), &[2, 8, 5, 5][..]);
    }

    #[test]
    fn scaling_sk_input_keeps_attention_finite(seed in any::<u64>(), k in 0.01f64..100.0) {
        let (block, store) = sk(8, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let x = random(&[1, 8, 4, 4], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind_constant(&mut tape);
        let xs = Tensor::from_fn(x.shape(), |i| x.data()[i] * k as Float);
        let xv = tape.constant(xs);
        let t = block.forward_traced(&mut tape, &p, xv).unwrap();
        prop_assert!(tape.value(t.weight_a).all_finite());
        prop_assert!(tape.value(t.output).all_finite());
    }
}

#[test]
fn identical_selection_weights_split_evenly() {
    let (block, mut store) = sk(8, 5);
    let wa = store.get(block.fc_select_a.weight).clone();
    let ba = store.get(block.fc_select_a.bias).clone();
    *store.get_mut(block.fc_select_b.weight) = wa;
    *store.get_mut(block.fc_select_b.bias) = ba;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut tape = Tape::new();
    let p = store.bind_constant(&mut tape);
    let x = tape.constant(random(&[2, 8, 6, 6], -1.0, 1.0, &mut rng));
    let t = block.forward_traced(&mut tape, &p, x).unwrap();
    for v in tape.value(t.weight_a).data().iter().chain(tape.value(t.weight_b).data()) {
        assert!((*v as f64 - 0.5).abs() < 1e-6);
    }
    let (ua, ub, out) = (tape.value(t.branch_a), tape.value(t.branch_b), tape.value(t.output));
    for i in 0..out.len() {
        let mid = 0.5 * (ua.data()[i] as f64 + ub.data()[i] as f64);
        assert!((out.data()[i] as f64 - mid).abs() < 1e-5);
    }
}

fn se_output(block: &SeResBlock, store: &ParamStore, x: &Tensor) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let p = store.bind_constant(&mut tape);
    let xv = tape.constant(x.clone());
    let t = block.forward_traced(&mut tape, &p, xv).unwrap();
    (tape.value(t.output).clone(), tape.value(t.residual).clone())
}

#[test]
fn saturated_gate_recovers_plain_residual() {
    let (block, mut store) = se(8, true, 7);
    let ex = block.excitation.as_ref().unwrap();
    *store.get_mut(ex.fc_expand.bias) = Tensor::full(&[8], 100.0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[1, 8, 6, 6], -1.0, 1.0, &mut rng);
    let (gated, _) = se_output(&block, &store, &x);
    let mut plain = block.clone();
    plain.excitation = None;
    let (ungated, _) = se_output(&plain, &store, &x);
    assert!(gated.max_abs_diff(&ungated) < 1e-4);
}

#[test]
fn closed_gate_passes_relu_of_input() {
    let (block, mut store) = se(8, true, 9);
    let ex = block.excitation.as_ref().unwrap();
    *store.get_mut(ex.fc_expand.bias) = Tensor::full(&[8], -100.0);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random(&[2, 8, 4, 4], -1.0, 1.0, &mut rng);
    let (out, _) = se_output(&block, &store, &x);
    let relu = Tensor::from_fn(x.shape(), |i| x.data()[i].max(0.0));
    assert!(out.max_abs_diff(&relu) < 1e-6);
}

#[test]
fn zero_input_gives_zero_output() {
    let (block, store) = se(8, true, 11);
    let (out, _) = se_output(&block, &store, &Tensor::zeros(&[1, 8, 4, 4]));
    assert!(out.data().iter().all(|v| *v == 0.0));
}

#[test]
fn blocks_reject_wrong_channel_count() {
    let (block, store) = sk(8, 12);
    let mut tape = Tape::new();
    let p = store.bind_constant(&mut tape);
    let x = tape.constant(Tensor::zeros(&[1, 4, 4, 4]));
    assert!(block.forward(&mut tape, &p, x).is_err());
}
