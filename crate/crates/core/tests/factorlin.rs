mod common;

use common::{max_abs_diff, randn, scramble, weighted_sum};
use factorweights::diffcore::{finite_diff_check, ParamStore, Tape, Tensor};
use factorweights::factorlin::{FactorizedLinear, LanguageId, SharedLinear};
use factorweights::SeedTree;
use proptest::prelude::*;

fn build(d_in: usize, d_out: usize, langs: usize, rank: usize, seed: u64) -> (ParamStore<f64>, FactorizedLinear) {
    let mut store = ParamStore::new();
    let layer = FactorizedLinear::new(&mut store, "layer", d_in, d_out, langs, rank, true).unwrap();
    layer.init_identity(&mut store, &SeedTree::new(seed)).unwrap();
    (store, layer)
}

fn explicit(store: &ParamStore<f64>, layer: &FactorizedLinear, lang: usize, x: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::with_params(store);
    let xv = tape.constant(x.clone()).unwrap();
    let y = layer.forward_explicit(&mut tape, LanguageId::new(lang), xv).unwrap();
    tape.value(y).clone()
}

fn fast_vs_explicit(d_in: usize, d_out: usize, langs: usize, rank: usize, batch: usize, seed: u64) -> f64 {
    let (mut store, layer) = build(d_in, d_out, langs, rank, seed);
    scramble(&mut store, seed, 1.0);
    let x = randn(&mut SeedTree::new(seed).stream("x"), &[batch, d_in]);
    (0..langs)
        .map(|l| {
            let fast = layer.forward_fast(&store, LanguageId::new(l), &x).unwrap();
            max_abs_diff(&fast, &explicit(&store, &layer, l, &x))
        })
        .fold(0.0, f64::max)
}

#[test]
fn fast_path_matches_explicit_d8_k1_l3() {
    assert!(fast_vs_explicit(8, 8, 3, 1, 4, 0) <= 1e-9);
}

#[test]
fn fast_path_matches_explicit_k3() {
    assert!(fast_vs_explicit(6, 5, 2, 3, 3, 0) <= 1e-9);
}

#[test]
fn identity_init_equals_shared_linear() {
    let mut store = ParamStore::new();
    let layer = FactorizedLinear::new(&mut store, "proj", 5, 4, 3, 2, true).unwrap();
    let plain = SharedLinear::new(&mut store, "plain", 5, 4, true).unwrap();
    let seeds = SeedTree::new(3);
    layer.init_identity(&mut store, &seeds).unwrap();
    plain.init(&mut store, &seeds).unwrap();
    // Plain layer gets the same shared weight and a nonzero bias on both.
    let w = store.value(layer.shared_weight()).clone();
    let b = randn(&mut seeds.stream("b"), &[4]);
    store.set_value(store.find("plain.W_S").unwrap(), w).unwrap();
    store.set_value(store.find("plain.b_S").unwrap(), b.clone()).unwrap();
    store.set_value(layer.bias().unwrap(), b).unwrap();

    let x = randn(&mut seeds.stream("x"), &[3, 5]);
    let mut tape = Tape::with_params(&store);
    let xv = tape.constant(x.clone()).unwrap();
    let base = plain.forward(&mut tape, xv).unwrap();
    let base = tape.value(base).clone();
    for l in 0..3 {
        assert!(max_abs_diff(&explicit(&store, &layer, l, &x), &base) <= 1e-12);
        let fast = layer.forward_fast(&store, LanguageId::new(l), &x).unwrap();
        assert!(max_abs_diff(&fast, &base) <= 1e-12);
    }
}

#[test]
fn rank_two_is_sum_of_two_rank_one_terms() {
    let (mut store, layer) = build(3, 4, 1, 2, 1);
    scramble(&mut store, 1, 1.0);
    let lang = LanguageId::new(0);
    let mut tape = Tape::with_params(&store);
    let w = layer.compose_weight(&mut tape, lang).unwrap();
    let got = tape.value(w).clone();

    let ws = store.value(layer.shared_weight());
    let mut expect = Tensor::<f64>::zeros(&[3, 4]);
    let mult = layer.mult_factors(lang);
    let add = layer.add_factors(lang);
    for i in 0..2 {
        // One rank-1 composition per pair, each owning one additive pair.
        let (rm, sm) = (store.value(mult[i].0), store.value(mult[i].1));
        let (ra, sa) = (store.value(add[i].0), store.value(add[i].1));
        for r in 0..3 {
            for c in 0..4 {
                expect.data_mut()[r * 4 + c] +=
                    ws.at(r, c) * rm.data()[r] * sm.data()[c] + ra.data()[r] * sa.data()[c];
            }
        }
    }
    assert!(max_abs_diff(&got, &expect) <= 1e-12);
}

#[test]
fn rank_k_is_reproduced_at_rank_k_plus_one() {
    let (mut small, s) = build(4, 3, 2, 2, 5);
    scramble(&mut small, 5, 1.0);
    let (mut big, b) = build(4, 3, 2, 3, 5);
    scramble(&mut big, 9, 1.0);
    big.set_value(b.shared_weight(), small.value(s.shared_weight()).clone()).unwrap();
    big.set_value(b.bias().unwrap(), small.value(s.bias().unwrap()).clone()).unwrap();
    for l in 0..2 {
        let lang = LanguageId::new(l);
        let targets = b.mult_factors(lang).into_iter().zip(b.add_factors(lang));
        let targets: Vec<_> = targets.collect();
        for (i, (src_r, src_s)) in s.mult_factors(lang).into_iter().enumerate() {
            big.set_value(targets[i].0 .0, small.value(src_r).clone()).unwrap();
            big.set_value(targets[i].0 .1, small.value(src_s).clone()).unwrap();
        }
        for (i, (src_r, src_s)) in s.add_factors(lang).into_iter().enumerate() {
            big.set_value(targets[i].1 .0, small.value(src_r).clone()).unwrap();
            big.set_value(targets[i].1 .1, small.value(src_s).clone()).unwrap();
        }
        // Extra pair: r stays random, s is zeroed.
        big.set_value(targets[2].0 .1, Tensor::zeros(&[3])).unwrap();
        big.set_value(targets[2].1 .1, Tensor::zeros(&[3])).unwrap();
    }
    let x = randn(&mut SeedTree::new(5).stream("x"), &[2, 4]);
    for l in 0..2 {
        let a = explicit(&small, &s, l, &x);
        let c = explicit(&big, &b, l, &x);
        assert!(max_abs_diff(&a, &c) <= 1e-12);
    }
}

#[test]
fn perturbing_one_language_leaves_others_bit_identical() {
    let (mut store, layer) = build(4, 3, 3, 2, 2);
    scramble(&mut store, 2, 1.0);
    let x = randn(&mut SeedTree::new(2).stream("x"), &[3, 4]);
    let before: Vec<_> = (0..3).map(|l| explicit(&store, &layer, l, &x)).collect();
    let fast = |store: &ParamStore<f64>, l: usize| layer.forward_fast(store, LanguageId::new(l), &x).unwrap();
    let before_fast: Vec<_> = (0..3).map(|l| fast(&store, l)).collect();
    for id in layer.language_params(LanguageId::new(1)) {
        let t = store.value(id).map(|v| v * 3.0 - 1.0);
        store.set_value(id, t).unwrap();
    }
    for l in [0, 2] {
        assert_eq!(explicit(&store, &layer, l, &x), before[l]);
        assert_eq!(fast(&store, l), before_fast[l]);
    }
    assert_ne!(explicit(&store, &layer, 1, &x), before[1]);
}

#[test]
fn backward_leaves_other_languages_without_gradient() {
    let (mut store, layer) = build(4, 3, 3, 2, 4);
    scramble(&mut store, 4, 1.0);
    let x = randn(&mut SeedTree::new(4).stream("x"), &[2, 4]);
    let mut tape = Tape::with_params(&store);
    let xv = tape.constant(x).unwrap();
    let y = layer.forward_explicit(&mut tape, LanguageId::new(0), xv).unwrap();
    let loss = weighted_sum(&mut tape, y, 4).unwrap();
    let grads = tape.backward(loss).unwrap();
    store.accumulate(&grads);
    for l in [1, 2] {
        for id in layer.language_params(LanguageId::new(l)) {
            assert!(store.grad(id).data().iter().all(|&g| g == 0.0), "{}", store.get(id).name());
        }
    }
    assert!(layer.language_params(LanguageId::new(0)).iter().all(|&id| store.grad(id).data().iter().any(|&g| g != 0.0)));
}

#[test]
fn additive_output_factor_receives_gradient_at_init() {
    let (store, layer) = build(4, 3, 2, 1, 0);
    let x = randn(&mut SeedTree::new(0).stream("x"), &[2, 4]);
    let mut tape = Tape::with_params(&store);
    let xv = tape.constant(x).unwrap();
    let y = layer.forward_explicit(&mut tape, LanguageId::new(0), xv).unwrap();
    let loss = weighted_sum(&mut tape, y, 0).unwrap();
    let grads = tape.backward(loss).unwrap();
    let s_a = layer.add_factors(LanguageId::new(0))[0].1;
    assert!(grads.get(s_a).unwrap().data().iter().any(|g| g.abs() > 1e-6));
}

#[test]
fn gradcheck_all_parameter_groups() {
    let (mut store, layer) = build(4, 3, 2, 2, 0);
    scramble(&mut store, 0, 0.7);
    let x = randn(&mut SeedTree::new(0).stream("x"), &[2, 4]);
    for l in 0..2 {
        let report = finite_diff_check(
            &mut store,
            None,
            |tape| {
                let xv = tape.constant(x.clone())?;
                let y = layer.forward_explicit(tape, LanguageId::new(l), xv)?;
                let y = tape.tanh(y)?;
                weighted_sum(tape, y, 7)
            },
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "lang {l}: {:?}", report.worst());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn fast_equals_explicit_everywhere(
        d_in in 1usize..=32,
        d_out in 1usize..=32,
        rank in 1usize..=4,
        langs in 1usize..=5,
        batch in 1usize..=8,
        seed in any::<u64>(),
    ) {
        prop_assert!(fast_vs_explicit(d_in, d_out, langs, rank, batch, seed) <= 1e-9);
    }
}
