//! Linear maps whose weight is a shared matrix modulated by per-language
//! rank-k factors:
//!
//! ```text
//! W(ℓ) = W_S ⊙ Σᵢ r_m[ℓ][i] s_m[ℓ][i]ᵀ + Σᵢ r_a[ℓ][i] s_a[ℓ][i]ᵀ
//! y    = x · W(ℓ) + b_S
//! ```
//!
//! Training composes `W(ℓ)` explicitly and runs one matmul. Inference can
//! skip the composition: each multiplicative pair gates the input by `r` and
//! the output of the shared matmul by `s`, and each additive pair contributes
//! `(x · r_a) s_aᵀ`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::{kernels, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::SeedTree;
use crate::scalar::Scalar;

/// Index of a language, valid for layers built with `L > index`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LanguageId(usize);

impl LanguageId {
    pub fn new(index: usize) -> Self {
        Self(index)
    }

    pub fn index(self) -> usize {
        self.0
    }

    pub fn check(self, langs: usize) -> Result<()> {
        if self.0 < langs {
            Ok(())
        } else {
            Err(Error::LanguageOutOfRange { lang: self.0, langs })
        }
    }
}

/// How linear maps are conditioned on the language.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditioning {
    /// Plain shared weights; the language is ignored.
    Shared,
    /// Shared weights with rank-`rank` multiplicative and additive factors.
    Factorized { rank: usize },
}

/// Parameter accounting for one factorized map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamOverhead {
    /// `2k(D_in + D_out)`: both factor banks of one language.
    pub per_language_added: usize,
    /// `D_in·D_out`, plus `D_out` with a bias.
    pub shared: usize,
    /// `per_language_added / shared`.
    pub ratio: f64,
    /// `k(D_in + D_out) / (D_in·D_out)`: one factorized matrix on its own.
    pub per_factor_ratio: f64,
}

fn xavier<T: Scalar>(rng: &mut impl Rng, d_in: usize, d_out: usize) -> Tensor<T> {
    let a = (6.0 / (d_in + d_out) as f64).sqrt();
    let data = (0..d_in * d_out).map(|_| T::lit(rng.random_range(-a..a))).collect();
    Tensor::from_raw(vec![d_in, d_out], data)
}

#[derive(Clone, Debug)]
pub struct FactorizedLinear {
    path: String,
    d_in: usize,
    d_out: usize,
    langs: usize,
    rank: usize,
    w_s: ParamId,
    b_s: Option<ParamId>,
    // Indexed [language][rank].
    r_m: Vec<Vec<ParamId>>,
    s_m: Vec<Vec<ParamId>>,
    r_a: Vec<Vec<ParamId>>,
    s_a: Vec<Vec<ParamId>>,
}

impl FactorizedLinear {
    /// Registers zero-valued parameters under `path`; call
    /// [`init_identity`](Self::init_identity) before use.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        path: &str,
        d_in: usize,
        d_out: usize,
        langs: usize,
        rank: usize,
        bias: bool,
    ) -> Result<Self> {
        if d_in == 0 || d_out == 0 || langs == 0 || rank == 0 {
            return Err(Error::invalid(format!(
                "{path}: dims, L and k must be positive (D_in={d_in}, D_out={d_out}, L={langs}, k={rank})"
            )));
        }
        let w_s = store.add(format!("{path}.W_S"), Tensor::zeros(&[d_in, d_out]))?;
        let b_s = if bias {
            Some(store.add(format!("{path}.b_S"), Tensor::zeros(&[d_out]))?)
        } else {
            None
        };
        let mut bank = |tag: &str, dim: usize| -> Result<Vec<Vec<ParamId>>> {
            (0..langs)
                .map(|l| {
                    (0..rank)
                        .map(|i| store.add(format!("{path}.{tag}.{l}.{i}"), Tensor::zeros(&[dim])))
                        .collect()
                })
                .collect()
        };
        let r_m = bank("r_m", d_in)?;
        let s_m = bank("s_m", d_out)?;
        let r_a = bank("r_a", d_in)?;
        let s_a = bank("s_a", d_out)?;
        Ok(Self {
            path: path.to_string(),
            d_in,
            d_out,
            langs,
            rank,
            w_s,
            b_s,
            r_m,
            s_m,
            r_a,
            s_a,
        })
    }

    /// Xavier-uniform `W_S`, zero `b_S`, multiplicative factors whose product
    /// is the all-ones matrix (ones on pair 0, zero `s_m` elsewhere), and
    /// additive factors with `r_a ~ N(0, 0.02²)`, `s_a = 0`. The composed
    /// weight then equals `W_S` for every language while `s_a` still
    /// receives gradient.
    pub fn init_identity<T: Scalar>(&self, store: &mut ParamStore<T>, seeds: &SeedTree) -> Result<()> {
        let mut rng = seeds.stream(&format!("{}.W_S", self.path));
        store.set_value(self.w_s, xavier(&mut rng, self.d_in, self.d_out))?;
        if let Some(b) = self.b_s {
            store.set_value(b, Tensor::zeros(&[self.d_out]))?;
        }
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        for l in 0..self.langs {
            for i in 0..self.rank {
                store.set_value(self.r_m[l][i], Tensor::ones(&[self.d_in]))?;
                let s = if i == 0 { T::one() } else { T::zero() };
                store.set_value(self.s_m[l][i], Tensor::full(&[self.d_out], s))?;
                let mut rng = seeds.stream(&format!("{}.r_a.{l}.{i}", self.path));
                let r_a = (0..self.d_in).map(|_| T::lit(normal.sample(&mut rng))).collect();
                store.set_value(self.r_a[l][i], Tensor::from_raw(vec![self.d_in], r_a))?;
                store.set_value(self.s_a[l][i], Tensor::zeros(&[self.d_out]))?;
            }
        }
        Ok(())
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn langs(&self) -> usize {
        self.langs
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn shared_weight(&self) -> ParamId {
        self.w_s
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.b_s
    }

    pub fn mult_factors(&self, lang: LanguageId) -> Vec<(ParamId, ParamId)> {
        let l = lang.index();
        self.r_m[l].iter().copied().zip(self.s_m[l].iter().copied()).collect()
    }

    pub fn add_factors(&self, lang: LanguageId) -> Vec<(ParamId, ParamId)> {
        let l = lang.index();
        self.r_a[l].iter().copied().zip(self.s_a[l].iter().copied()).collect()
    }

    /// Every factor vector owned by `lang`.
    pub fn language_params(&self, lang: LanguageId) -> Vec<ParamId> {
        let l = lang.index();
        [&self.r_m, &self.s_m, &self.r_a, &self.s_a]
            .into_iter()
            .flat_map(|bank| bank[l].iter().copied())
            .collect()
    }

    /// `W_S ⊙ (Σᵢ r_m sᵀ_m) + Σᵢ r_a sᵀ_a` on the tape.
    pub fn compose_weight<T: Scalar>(&self, tape: &mut Tape<'_, T>, lang: LanguageId) -> Result<Var> {
        lang.check(self.langs)?;
        let w = tape.param(self.w_s)?;
        let mut pair_vars = |pairs: Vec<(ParamId, ParamId)>| -> Result<Vec<(Var, Var)>> {
            pairs.into_iter().map(|(r, s)| Ok((tape.param(r)?, tape.param(s)?))).collect()
        };
        let mult = pair_vars(self.mult_factors(lang))?;
        let add = pair_vars(self.add_factors(lang))?;
        tape.modulate(w, &mult, &add)
    }

    /// `x · compose_weight(ℓ) + b_S`, fully differentiable.
    pub fn forward_explicit<T: Scalar>(&self, tape: &mut Tape<'_, T>, lang: LanguageId, x: Var) -> Result<Var> {
        self.check_input(tape.shape(x))?;
        let w = self.compose_weight(tape, lang)?;
        let y = tape.matmul(x, w)?;
        match self.b_s {
            Some(b) => {
                let b = tape.param(b)?;
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    /// Gated evaluation without composing the weight:
    /// `Σᵢ ((x ⊙ r_m[i]) · W_S) ⊙ s_m[i] + Σᵢ (x · r_a[i]) s_a[i]ᵀ + b_S`.
    pub fn forward_fast<T: Scalar>(&self, store: &ParamStore<T>, lang: LanguageId, x: &Tensor<T>) -> Result<Tensor<T>> {
        lang.check(self.langs)?;
        self.check_input(x.shape())?;
        let (rows, d_in, d_out) = (x.rows(), self.d_in, self.d_out);
        let w = store.value(self.w_s).data();
        let mut out = vec![T::zero(); rows * d_out];
        let mut gated = vec![T::zero(); rows * d_in];
        for (r, s) in self.mult_factors(lang) {
            let (r, s) = (store.value(r).data(), store.value(s).data());
            for (g_row, x_row) in gated.chunks_exact_mut(d_in).zip(x.data().chunks_exact(d_in)) {
                for ((g, &xv), &rv) in g_row.iter_mut().zip(x_row).zip(r) {
                    *g = xv * rv;
                }
            }
            let y = kernels::matmul(&gated, w, rows, d_in, d_out);
            for (o_row, y_row) in out.chunks_exact_mut(d_out).zip(y.chunks_exact(d_out)) {
                for ((o, &yv), &sv) in o_row.iter_mut().zip(y_row).zip(s) {
                    *o += yv * sv;
                }
            }
        }
        for (r, s) in self.add_factors(lang) {
            let (r, s) = (store.value(r).data(), store.value(s).data());
            for (o_row, x_row) in out.chunks_exact_mut(d_out).zip(x.data().chunks_exact(d_in)) {
                let a = kernels::dot(x_row, r);
                for (o, &sv) in o_row.iter_mut().zip(s) {
                    *o += a * sv;
                }
            }
        }
        if let Some(b) = self.b_s {
            let b = store.value(b).data();
            for o_row in out.chunks_exact_mut(d_out) {
                for (o, &bv) in o_row.iter_mut().zip(b) {
                    *o += bv;
                }
            }
        }
        Tensor::new(vec![rows, d_out], out)
    }

    pub fn param_overhead(&self) -> ParamOverhead {
        let per_language_added = 2 * self.rank * (self.d_in + self.d_out);
        let shared = self.d_in * self.d_out + if self.b_s.is_some() { self.d_out } else { 0 };
        ParamOverhead {
            per_language_added,
            shared,
            ratio: per_language_added as f64 / shared as f64,
            per_factor_ratio: (self.rank * (self.d_in + self.d_out)) as f64 / (self.d_in * self.d_out) as f64,
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        match shape {
            &[_, d] if d == self.d_in => Ok(()),
            other => Err(Error::shape("factorized_linear", other, &[0, self.d_in])),
        }
    }
}

/// A plain linear map, used by the fully-shared baseline.
#[derive(Clone, Debug)]
pub struct SharedLinear {
    path: String,
    d_in: usize,
    d_out: usize,
    w: ParamId,
    b: Option<ParamId>,
}

impl SharedLinear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, path: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(Error::invalid(format!("{path}: dims must be positive")));
        }
        let w = store.add(format!("{path}.W_S"), Tensor::zeros(&[d_in, d_out]))?;
        let b = if bias {
            Some(store.add(format!("{path}.b_S"), Tensor::zeros(&[d_out]))?)
        } else {
            None
        };
        Ok(Self {
            path: path.to_string(),
            d_in,
            d_out,
            w,
            b,
        })
    }

    /// Same draw for `W_S` as [`FactorizedLinear::init_identity`].
    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seeds: &SeedTree) -> Result<()> {
        let mut rng = seeds.stream(&format!("{}.W_S", self.path));
        store.set_value(self.w, xavier(&mut rng, self.d_in, self.d_out))?;
        if let Some(b) = self.b {
            store.set_value(b, Tensor::zeros(&[self.d_out]))?;
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        match tape.shape(x) {
            &[_, d] if d == self.d_in => {}
            other => return Err(Error::shape("linear", other, &[0, self.d_in])),
        }
        let w = tape.param(self.w)?;
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(b)?;
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// A linear map of either kind, as used by every block.
#[derive(Clone, Debug)]
pub enum Projection {
    Shared(SharedLinear),
    Factorized(FactorizedLinear),
}

impl Projection {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        path: &str,
        d_in: usize,
        d_out: usize,
        langs: usize,
        conditioning: Conditioning,
        bias: bool,
    ) -> Result<Self> {
        Ok(match conditioning {
            Conditioning::Shared => Projection::Shared(SharedLinear::new(store, path, d_in, d_out, bias)?),
            Conditioning::Factorized { rank } => {
                Projection::Factorized(FactorizedLinear::new(store, path, d_in, d_out, langs, rank, bias)?)
            }
        })
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seeds: &SeedTree) -> Result<()> {
        match self {
            Projection::Shared(l) => l.init(store, seeds),
            Projection::Factorized(l) => l.init_identity(store, seeds),
        }
    }

    pub fn d_in(&self) -> usize {
        match self {
            Projection::Shared(l) => l.d_in,
            Projection::Factorized(l) => l.d_in,
        }
    }

    pub fn d_out(&self) -> usize {
        match self {
            Projection::Shared(l) => l.d_out,
            Projection::Factorized(l) => l.d_out,
        }
    }

    pub fn shared_weight(&self) -> ParamId {
        match self {
            Projection::Shared(l) => l.w,
            Projection::Factorized(l) => l.w_s,
        }
    }

    pub fn bias(&self) -> Option<ParamId> {
        match self {
            Projection::Shared(l) => l.b,
            Projection::Factorized(l) => l.b_s,
        }
    }

    pub fn factorized(&self) -> Option<&FactorizedLinear> {
        match self {
            Projection::Factorized(l) => Some(l),
            Projection::Shared(_) => None,
        }
    }

    /// On a tracking tape: the explicit composed path. On an inference tape:
    /// the gated fast path, entered on the tape as a constant.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, lang: LanguageId, x: Var) -> Result<Var> {
        match self {
            Projection::Shared(l) => l.forward(tape, x),
            Projection::Factorized(l) if tape.is_tracking() => l.forward_explicit(tape, lang, x),
            Projection::Factorized(l) => {
                let y = l.forward_fast(tape.store()?, lang, tape.value(x))?;
                tape.constant(y)
            }
        }
    }

    /// The effective weight for `lang` as a tape node.
    pub fn weight<T: Scalar>(&self, tape: &mut Tape<'_, T>, lang: LanguageId) -> Result<Var> {
        match self {
            Projection::Shared(l) => tape.param(l.w),
            Projection::Factorized(l) => l.compose_weight(tape, lang),
        }
    }

    pub fn param_overhead(&self) -> Option<ParamOverhead> {
        self.factorized().map(FactorizedLinear::param_overhead)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(d_in: usize, d_out: usize, langs: usize, rank: usize) -> (ParamStore<f64>, FactorizedLinear) {
        let mut store = ParamStore::new();
        let l = FactorizedLinear::new(&mut store, "layer", d_in, d_out, langs, rank, true).unwrap();
        l.init_identity(&mut store, &SeedTree::new(0)).unwrap();
        (store, l)
    }

    fn composed(store: &ParamStore<f64>, l: &FactorizedLinear, lang: usize) -> Tensor<f64> {
        let mut tape = Tape::with_params(store);
        let w = l.compose_weight(&mut tape, LanguageId::new(lang)).unwrap();
        tape.value(w).clone()
    }

    #[test]
    fn identity_init_composes_to_shared_weight() {
        let (store, l) = layer(5, 3, 3, 3);
        for lang in 0..3 {
            assert_eq!(&composed(&store, &l, lang), store.value(l.shared_weight()));
            // Σᵢ r_m sᵢᵀ is all ones.
            let mut ones = Tensor::<f64>::zeros(&[5, 3]);
            for (r, s) in l.mult_factors(LanguageId::new(lang)) {
                let (r, s) = (store.value(r), store.value(s));
                for i in 0..5 {
                    for j in 0..3 {
                        ones.data_mut()[i * 3 + j] += r.data()[i] * s.data()[j];
                    }
                }
            }
            assert!(ones.data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn compose_matches_hand_example() {
        let mut store = ParamStore::new();
        let l = FactorizedLinear::new(&mut store, "toy", 2, 2, 1, 1, false).unwrap();
        let lang = LanguageId::new(0);
        store.set_value(l.shared_weight(), Tensor::identity(2)).unwrap();
        let (rm, sm) = l.mult_factors(lang)[0];
        let (ra, sa) = l.add_factors(lang)[0];
        store.set_value(rm, Tensor::vector(&[2.0, 3.0]).unwrap()).unwrap();
        store.set_value(sm, Tensor::vector(&[1.0, 1.0]).unwrap()).unwrap();
        store.set_value(ra, Tensor::vector(&[1.0, 0.0]).unwrap()).unwrap();
        store.set_value(sa, Tensor::vector(&[0.0, 1.0]).unwrap()).unwrap();
        // Brute force: W[i,j]·r[i]·s[j] + r_a[i]·s_a[j].
        let w = [[1.0, 0.0], [0.0, 1.0]];
        let (r, s, a, b) = ([2.0, 3.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]);
        let mut expect = vec![];
        for i in 0..2 {
            for j in 0..2 {
                expect.push(w[i][j] * r[i] * s[j] + a[i] * b[j]);
            }
        }
        assert_eq!(expect, vec![2.0, 1.0, 0.0, 3.0]);
        assert_eq!(composed(&store, &l, 0).data(), expect.as_slice());

        let mut tape = Tape::with_params(&store);
        let x = tape.constant(Tensor::matrix(&[&[1.0, 1.0]]).unwrap()).unwrap();
        let y = l.forward_explicit(&mut tape, lang, x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 4.0]);
        let fast = l.forward_fast(&store, lang, &Tensor::matrix(&[&[1.0, 1.0]]).unwrap()).unwrap();
        assert_eq!(fast.data(), &[2.0, 4.0]);
    }

    #[test]
    fn language_out_of_range_names_l() {
        let (store, l) = layer(2, 2, 2, 1);
        let mut tape = Tape::with_params(&store);
        let err = l.compose_weight(&mut tape, LanguageId::new(2)).unwrap_err();
        assert!(err.to_string().contains("L = 2"), "{err}");
    }

    #[test]
    fn input_width_is_checked() {
        let (store, l) = layer(3, 2, 1, 1);
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(Tensor::zeros(&[1, 4])).unwrap();
        assert!(matches!(l.forward_explicit(&mut tape, LanguageId::new(0), x), Err(Error::Shape { .. })));
        assert!(l.forward_fast(&store, LanguageId::new(0), &Tensor::zeros(&[1, 4])).is_err());
    }

    #[test]
    fn overhead_counts() {
        let mut store = ParamStore::<f64>::new();
        let l = FactorizedLinear::new(&mut store, "big", 1024, 1024, 1, 1, false).unwrap();
        let o = l.param_overhead();
        assert_eq!(o.per_language_added, 4096);
        assert_eq!(o.shared, 1_048_576);
        assert!((o.ratio - 0.00390625).abs() < 1e-15);
        assert!((o.per_factor_ratio - 0.001953125).abs() < 1e-15);
        let l4 = FactorizedLinear::new(&mut store, "big4", 1024, 1024, 1, 4, false).unwrap();
        assert_eq!(l4.param_overhead().per_language_added, 4 * o.per_language_added);
        let l512 = FactorizedLinear::new(&mut store, "mid", 512, 512, 1, 1, false).unwrap();
        assert!((l512.param_overhead().per_factor_ratio - 1024.0 / 262_144.0).abs() < 1e-15);
    }

    #[test]
    fn constructor_rejects_zero_rank() {
        let mut store = ParamStore::<f64>::new();
        assert!(FactorizedLinear::new(&mut store, "x", 2, 2, 1, 0, false).is_err());
    }
}
