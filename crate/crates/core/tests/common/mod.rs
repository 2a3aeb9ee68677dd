#![allow(dead_code)]

use factorweights::diffcore::{ParamStore, Tape, Tensor, Var};
use factorweights::{Result, Scalar, SeedTree};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn randn(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Overwrites every parameter with `scale · N(0, 1)` so that no factor sits
/// at its degenerate identity value.
pub fn scramble<T: Scalar>(store: &mut ParamStore<T>, seed: u64, scale: f64) {
    let mut rng = SeedTree::new(seed).stream("scramble");
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        let t = randn(&mut rng, &shape).map(|v| v * scale).cast();
        store.set_value(id, t).unwrap();
    }
}

/// `Σ y ⊙ R` for a fixed random `R`, so every output entry carries a
/// distinct weight in the loss.
pub fn weighted_sum<T: Scalar>(tape: &mut Tape<'_, T>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut rng = SeedTree::new(seed).stream("weights");
    let r = tape.constant(randn(&mut rng, &shape).cast())?;
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Effective weight of a projection for language `l`, composed entry by entry.
pub fn brute_weight(store: &ParamStore<f64>, p: &factorweights::factorlin::Projection, l: usize) -> Vec<Vec<f64>> {
    use factorweights::factorlin::LanguageId;
    let w = store.value(p.shared_weight());
    let (d_in, d_out) = (p.d_in(), p.d_out());
    let mut out = vec![vec![0.0; d_out]; d_in];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = w.at(i, j);
            if let Some(f) = p.factorized() {
                let pair_sum = |pairs: Vec<(factorweights::diffcore::ParamId, factorweights::diffcore::ParamId)>| -> f64 {
                    pairs.iter().map(|&(r, s)| store.value(r).data()[i] * store.value(s).data()[j]).sum()
                };
                let lang = LanguageId::new(l);
                *v = *v * pair_sum(f.mult_factors(lang)) + pair_sum(f.add_factors(lang));
            }
        }
    }
    out
}
