//! Seeded verification sweeps behind the `gradcheck` and `equiv-check`
//! commands.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::blocks::{AttentionDims, BlockSpec, FactorizedAttentionBlock, FactorizedLstmCell, FeedForward, LayerNorm, MultiHeadAttention};
use crate::diffcore::{finite_diff_check, AttentionPlan, GradCheckReport, ParamStore, Tape, Tensor, Var};
use crate::doubledouble::DoubleDouble;
use crate::error::Result;
use crate::factorlin::{Conditioning, FactorizedLinear, LanguageId};
use crate::rng::SeedTree;
use crate::scalar::Scalar;
use crate::seq2seq::{Architecture, EncoderDecoderModel, ModelConfig, Utterance, BOS, EOS, FIRST_SYMBOL};

/// Central-difference step used by every check.
pub const FD_STEP: f64 = 1e-6;
/// Maximum accepted relative error.
pub const GRAD_TOLERANCE: f64 = 1e-5;
/// Maximum accepted fast-versus-explicit deviation.
pub const EQUIV_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct ComponentCheck {
    pub component: String,
    pub seed: u64,
    pub report: GradCheckReport,
}

/// Sizes for [`gradcheck_suite`].
#[derive(Clone, Copy, Debug)]
pub struct SuiteDims {
    /// Input and output width of the standalone factorized linear map.
    pub linear: (usize, usize),
    pub rank: usize,
    pub langs: usize,
}

impl Default for SuiteDims {
    fn default() -> Self {
        Self {
            linear: (4, 3),
            rank: 1,
            langs: 3,
        }
    }
}

type Dd = DoubleDouble;

fn randn<T: Scalar>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(StandardNormal.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("finite normal draws")
}

/// Replaces every parameter by `scale · N(0, 1)` so no factor sits at its
/// identity value, where some gradients vanish by symmetry.
fn scramble<T: Scalar>(store: &mut ParamStore<T>, seed: u64, scale: f64) -> Result<()> {
    let mut rng = SeedTree::new(seed).stream("scramble");
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, randn::<T>(&mut rng, &shape).map(|v| v * T::lit(scale)))?;
    }
    Ok(())
}

/// `Σ y ⊙ R` with fixed random `R`.
fn weighted_sum<T: Scalar>(tape: &mut Tape<'_, T>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let r = tape.constant(randn(&mut SeedTree::new(seed).stream("weights"), &shape))?;
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

fn check(store: &mut ParamStore<Dd>, f: impl Fn(&mut Tape<'_, Dd>) -> Result<Var>) -> Result<GradCheckReport> {
    finite_diff_check(store, None, f, Dd::from_f64(FD_STEP), GRAD_TOLERANCE)
}

/// Gradient checks of every building block and of the sequence loss of the
/// given architectures, one per seed. Runs in double-double arithmetic, where
/// central differences are limited by truncation rather than rounding.
pub fn gradcheck_suite(archs: &[Architecture], dims: SuiteDims, seeds: &[u64]) -> Result<Vec<ComponentCheck>> {
    let spec = BlockSpec {
        langs: dims.langs,
        conditioning: Conditioning::Factorized { rank: dims.rank },
    };
    let last = LanguageId::new(dims.langs - 1);
    let mut out = Vec::new();
    for &seed in seeds {
        let mut push = |component: &str, report| {
            out.push(ComponentCheck {
                component: component.to_string(),
                seed,
                report,
            })
        };
        let mut rng = SeedTree::new(seed).stream("inputs");
        let x: Tensor<Dd> = randn(&mut rng, &[3, 4]);

        let mut store = ParamStore::new();
        let (d_in, d_out) = dims.linear;
        let layer = FactorizedLinear::new(&mut store, "linear", d_in, d_out, dims.langs, dims.rank, true)?;
        scramble(&mut store, seed, 0.7)?;
        let xl: Tensor<Dd> = randn(&mut rng, &[2, d_in]);
        push(
            "factorized_linear",
            check(&mut store, |t| {
                let xv = t.constant(xl.clone())?;
                let y = layer.forward_explicit(t, last, xv)?;
                weighted_sum(t, y, seed)
            })?,
        );

        let mut store = ParamStore::new();
        let cell = FactorizedLstmCell::new(&mut store, "cell", 4, 3, spec)?;
        scramble(&mut store, seed, 0.7)?;
        let (h, c): (Tensor<Dd>, Tensor<Dd>) = (randn(&mut rng, &[3, 3]), randn(&mut rng, &[3, 3]));
        push(
            "lstm_cell",
            check(&mut store, |t| {
                let (xv, hv, cv) = (t.constant(x.clone())?, t.constant(h.clone())?, t.constant(c.clone())?);
                let (h1, c1) = cell.step(t, last, xv, hv, cv)?;
                let (h2, _) = cell.step(t, last, xv, h1, c1)?;
                weighted_sum(t, h2, seed)
            })?,
        );

        let mut store = ParamStore::new();
        let attn = MultiHeadAttention::new(&mut store, "attn", 4, 2, spec)?;
        scramble(&mut store, seed, 0.7)?;
        push(
            "multi_head_attention",
            check(&mut store, |t| {
                let xv = t.constant(x.clone())?;
                let y = attn.self_attention(t, last, xv, true)?;
                weighted_sum(t, y, seed)
            })?,
        );

        let mut store = ParamStore::new();
        let dims4 = AttentionDims {
            d_model: 4,
            heads: 2,
            d_ff: 6,
        };
        let block = FactorizedAttentionBlock::new(&mut store, "block", dims4, true, spec)?;
        scramble(&mut store, seed, 0.7)?;
        let memory: Tensor<Dd> = randn(&mut rng, &[4, 4]);
        push(
            "attention_block",
            check(&mut store, |t| {
                let (xv, mv) = (t.constant(x.clone())?, t.constant(memory.clone())?);
                let cross = AttentionPlan::cross(&[1, 2], &[3, 1])?;
                let own = AttentionPlan::self_attention(&[1, 2], true)?;
                let y = block.forward(t, last, xv, &own, Some((mv, &cross)))?;
                weighted_sum(t, y, seed)
            })?,
        );

        let mut store = ParamStore::new();
        let ffn = FeedForward::new(&mut store, "ffn", 4, 8, spec)?;
        scramble(&mut store, seed, 0.7)?;
        push(
            "feed_forward",
            check(&mut store, |t| {
                let xv = t.constant(x.clone())?;
                let y = ffn.forward(t, last, xv)?;
                weighted_sum(t, y, seed)
            })?,
        );

        let mut store = ParamStore::new();
        let norm = LayerNorm::new(&mut store, "norm", 4)?;
        scramble(&mut store, seed, 1.0)?;
        push(
            "layer_norm",
            check(&mut store, |t| {
                let xv = t.constant(x.clone())?;
                let y = norm.forward(t, xv)?;
                weighted_sum(t, y, seed)
            })?,
        );

        for &arch in archs {
            let config = ModelConfig {
                architecture: arch,
                d_feat: 5,
                d_model: 8,
                symbols: 5,
                langs: dims.langs,
                encoder_layers: 1,
                decoder_layers: 1,
                heads: 2,
                d_ff: 8,
                conditioning: Conditioning::Factorized { rank: dims.rank },
                positional: true,
                zero_output: false,
            };
            let (mut store, model) = EncoderDecoderModel::build::<Dd>(config, seed)?;
            scramble(&mut store, seed, 0.5)?;
            let frames: Tensor<f64> = randn(&mut rng, &[3, 5]);
            let tokens = vec![BOS, FIRST_SYMBOL + 1, FIRST_SYMBOL + 4, FIRST_SYMBOL, EOS];
            let u = Utterance::new(frames, tokens, last)?;
            push(&format!("sequence_loss_{arch}"), check(&mut store, |t| model.sequence_loss(t, &u))?);
        }
    }
    Ok(out)
}

/// Result of [`equivalence_sweep`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EquivalenceReport {
    pub cases: usize,
    /// Largest `|forward_fast − forward_explicit|` over all cases and entries.
    pub max_deviation: f64,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.max_deviation <= EQUIV_TOLERANCE
    }
}

/// Random layer shape for one sweep case; `None` fields are drawn per case.
#[derive(Clone, Copy, Debug, Default)]
pub struct SweepShape {
    pub dims: Option<(usize, usize)>,
    pub rank: Option<usize>,
    pub langs: Option<usize>,
}

/// Compares the fused fast path with the explicitly composed weight over
/// `cases` random layers. Undrawn widths come from 4..=64, ranks from 1..=4
/// and language counts from 1..=8; factors are scrambled away from identity.
pub fn equivalence_sweep(shape: SweepShape, cases: usize, seed: u64) -> Result<EquivalenceReport> {
    let seeds = SeedTree::new(seed).child("equivalence");
    let mut max_deviation: f64 = 0.0;
    for case in 0..cases {
        let mut rng = seeds.stream(&format!("case.{case}"));
        let (d_in, d_out) = shape
            .dims
            .unwrap_or_else(|| (rng.random_range(4..=64), rng.random_range(4..=64)));
        let rank = shape.rank.unwrap_or_else(|| rng.random_range(1..=4));
        let langs = shape.langs.unwrap_or_else(|| rng.random_range(1..=8));
        let bias = rng.random_bool(0.5);
        let mut store = ParamStore::<f64>::new();
        let layer = FactorizedLinear::new(&mut store, "layer", d_in, d_out, langs, rank, bias)?;
        scramble(&mut store, seeds.child(&format!("params.{case}")).seed(), 1.0)?;
        let rows = rng.random_range(1..=8);
        let x: Tensor<f64> = randn(&mut rng, &[rows, d_in]);
        for l in 0..langs {
            let lang = LanguageId::new(l);
            let fast = layer.forward_fast(&store, lang, &x)?;
            let mut tape = Tape::with_params(&store);
            let xv = tape.constant(x.clone())?;
            let y = layer.forward_explicit(&mut tape, lang, xv)?;
            max_deviation = max_deviation.max(fast.max_abs_diff(tape.value(y))?);
        }
    }
    Ok(EquivalenceReport { cases, max_deviation })
}
