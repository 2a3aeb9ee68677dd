mod common;

use common::{brute_weight, max_abs_diff, randn, scramble, weighted_sum};
use factorweights::blocks::{
    layer_norm, AttentionDims, BlockSpec, FactorizedAttentionBlock, FactorizedLstmCell, FeedForward, LayerNorm,
    MultiHeadAttention,
};
use factorweights::diffcore::{finite_diff_check, AttentionPlan, ParamStore, Tape, Tensor, Var};
use factorweights::factorlin::{Conditioning, LanguageId, Projection};
use factorweights::{DoubleDouble, Result, SeedTree};

const FACTORIZED: BlockSpec = BlockSpec {
    langs: 3,
    conditioning: Conditioning::Factorized { rank: 2 },
};
const SHARED: BlockSpec = BlockSpec {
    langs: 3,
    conditioning: Conditioning::Shared,
};

fn lang(l: usize) -> LanguageId {
    LanguageId::new(l)
}

fn eval(store: &ParamStore<f64>, f: impl FnOnce(&mut Tape<'_, f64>) -> Result<Var>) -> Tensor<f64> {
    let mut tape = Tape::with_params(store);
    let out = f(&mut tape).unwrap();
    tape.value(out).clone()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn lstm_pair(seed: u64) -> (ParamStore<f64>, FactorizedLstmCell, ParamStore<f64>, FactorizedLstmCell) {
    let seeds = SeedTree::new(seed);
    let mut fs = ParamStore::new();
    let f = FactorizedLstmCell::new(&mut fs, "cell", 3, 2, FACTORIZED).unwrap();
    f.init(&mut fs, &seeds).unwrap();
    let mut ss = ParamStore::new();
    let s = FactorizedLstmCell::new(&mut ss, "cell", 3, 2, SHARED).unwrap();
    s.init(&mut ss, &seeds).unwrap();
    (fs, f, ss, s)
}

fn step(store: &ParamStore<f64>, cell: &FactorizedLstmCell, l: usize, x: &Tensor<f64>, h: &Tensor<f64>, c: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let mut tape = Tape::with_params(store);
    let (xv, hv, cv) = (tape.constant(x.clone()).unwrap(), tape.constant(h.clone()).unwrap(), tape.constant(c.clone()).unwrap());
    let (h, c) = cell.step(&mut tape, lang(l), xv, hv, cv).unwrap();
    (tape.value(h).clone(), tape.value(c).clone())
}

#[test]
fn lstm_with_zero_weights_outputs_zero() {
    let (mut store, cell, _, _) = lstm_pair(0);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, Tensor::zeros(&shape)).unwrap();
    }
    let x = randn(&mut SeedTree::new(0).stream("x"), &[2, 3]);
    let (h, c) = step(&store, &cell, 0, &x, &Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2, 2]));
    assert!(h.data().iter().chain(c.data()).all(|&v| v == 0.0));
}

#[test]
fn lstm_identity_init_matches_shared_cell() {
    let (fs, f, ss, s) = lstm_pair(1);
    let mut rng = SeedTree::new(1).stream("inputs");
    let (x, h, c) = (randn(&mut rng, &[4, 3]), randn(&mut rng, &[4, 2]), randn(&mut rng, &[4, 2]));
    let (hb, cb) = step(&ss, &s, 0, &x, &h, &c);
    for l in 0..3 {
        let (hf, cf) = step(&fs, &f, l, &x, &h, &c);
        assert!(max_abs_diff(&hf, &hb) <= 1e-12 && max_abs_diff(&cf, &cb) <= 1e-12);
    }
}

#[test]
fn lstm_step_matches_scalar_oracle() {
    let (mut store, cell, _, _) = lstm_pair(0);
    scramble(&mut store, 0, 0.8);
    let mut rng = SeedTree::new(0).stream("inputs");
    let (x, h, c) = (randn(&mut rng, &[2, 3]), randn(&mut rng, &[2, 2]), randn(&mut rng, &[2, 2]));
    let l = 1;
    let projections: Vec<&Projection> = cell.projections().collect();
    let wx: Vec<_> = (0..4).map(|g| brute_weight(&store, projections[g], l)).collect();
    let wh: Vec<_> = (0..4).map(|g| brute_weight(&store, projections[4 + g], l)).collect();
    let b: Vec<_> = cell.gate_biases().iter().map(|&id| store.value(id).data().to_vec()).collect();
    let (got_h, got_c) = step(&store, &cell, l, &x, &h, &c);
    for r in 0..2 {
        for j in 0..2 {
            let pre = |g: usize| {
                let mut s = b[g][j];
                for i in 0..3 {
                    s += x.at(r, i) * wx[g][i][j];
                }
                for i in 0..2 {
                    s += h.at(r, i) * wh[g][i][j];
                }
                s
            };
            let (f, i, cand, o) = (sigmoid(pre(0)), sigmoid(pre(1)), pre(2).tanh(), sigmoid(pre(3)));
            let c_new = f * c.at(r, j) + i * cand;
            let h_new = o * c_new.tanh();
            assert!((got_c.at(r, j) - c_new).abs() <= 1e-12);
            assert!((got_h.at(r, j) - h_new).abs() <= 1e-12);
        }
    }
}

#[test]
fn lstm_run_equals_repeated_steps() {
    let (mut store, cell, _, _) = lstm_pair(2);
    scramble(&mut store, 2, 0.6);
    let (steps, batch) = (4, 3);
    let xs = randn(&mut SeedTree::new(2).stream("xs"), &[steps * batch, 3]);
    for tracking in [true, false] {
        let mut tape = if tracking { Tape::with_params(&store) } else { Tape::inference(&store) };
        let xv = tape.constant(xs.clone()).unwrap();
        let fused = cell.run(&mut tape, lang(2), xv, batch).unwrap();
        let fused = tape.value(fused).clone();
        let (mut h, mut c) = (Tensor::zeros(&[batch, 2]), Tensor::zeros(&[batch, 2]));
        for t in 0..steps {
            let x = Tensor::new(vec![batch, 3], xs.data()[t * batch * 3..(t + 1) * batch * 3].to_vec()).unwrap();
            (h, c) = step(&store, &cell, 2, &x, &h, &c);
            let got = &fused.data()[t * batch * 2..(t + 1) * batch * 2];
            let diff = got.iter().zip(h.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff <= 1e-12, "step {t}: {diff}");
        }
    }
}

#[test]
fn lstm_shape_error_names_gate() {
    let (store, cell, _, _) = lstm_pair(0);
    let mut tape = Tape::with_params(&store);
    let x = tape.constant(Tensor::zeros(&[1, 4])).unwrap();
    let h = tape.constant(Tensor::zeros(&[1, 2])).unwrap();
    let err = cell.step(&mut tape, lang(0), x, h, h).unwrap_err();
    assert!(err.to_string().contains("W_fx"), "{err}");
}

fn mha(store: &mut ParamStore<f64>, spec: BlockSpec, d: usize, heads: usize, seed: u64) -> MultiHeadAttention {
    let m = MultiHeadAttention::new(store, "attn", d, heads, spec).unwrap();
    m.init(store, &SeedTree::new(seed)).unwrap();
    m
}

#[test]
fn heads_must_divide_model_width() {
    let mut store = ParamStore::<f64>::new();
    assert!(MultiHeadAttention::new(&mut store, "attn", 6, 4, SHARED).is_err());
}

#[test]
fn single_position_attention_returns_projected_value() {
    let mut store = ParamStore::new();
    let m = mha(&mut store, SHARED, 4, 2, 0);
    scramble(&mut store, 0, 1.0);
    let x = randn(&mut SeedTree::new(0).stream("x"), &[1, 4]);
    let got = eval(&store, |t| {
        let xv = t.constant(x.clone())?;
        m.self_attention(t, lang(0), xv, false)
    });
    let p: Vec<_> = m.projections().collect();
    let v = x.matmul(store.value(p[2].shared_weight())).unwrap();
    let row = |id| Tensor::new(vec![1, 4], store.value(id).data().to_vec()).unwrap();
    let v = v.zip_map(&row(p[2].bias().unwrap()), "bias", |a, b| a + b).unwrap();
    let o = v.matmul(store.value(p[3].shared_weight())).unwrap();
    let o = o.zip_map(&row(p[3].bias().unwrap()), "bias", |a, b| a + b).unwrap();
    assert!(max_abs_diff(&got, &o) <= 1e-12);
}

#[test]
fn identical_rows_attend_uniformly() {
    let mut store = ParamStore::new();
    let m = mha(&mut store, FACTORIZED, 4, 2, 3);
    scramble(&mut store, 3, 1.0);
    let row = randn(&mut SeedTree::new(3).stream("row"), &[1, 4]);
    let x = Tensor::new(vec![3, 4], row.data().repeat(3)).unwrap();
    let values = randn(&mut SeedTree::new(3).stream("v"), &[3, 4]);
    let p: Vec<_> = m.projections().collect();
    let got = eval(&store, |t| {
        let xv = t.constant(x.clone())?;
        let q = p[0].forward(t, lang(1), xv)?;
        let k = p[1].forward(t, lang(1), xv)?;
        let v = t.constant(values.clone())?;
        t.attention(q, k, v, 2, &AttentionPlan::self_attention(&[3], false)?)
    });
    for r in 0..3 {
        for c in 0..4 {
            let mean = (0..3).map(|i| values.at(i, c)).sum::<f64>() / 3.0;
            assert!((got.at(r, c) - mean).abs() <= 1e-12);
        }
    }
}

#[test]
fn two_by_two_attention_matches_hand_computation() {
    let mut store = ParamStore::new();
    let m = mha(&mut store, SHARED, 2, 1, 0);
    let p: Vec<_> = m.projections().collect();
    let wv = [[1.0, 2.0], [3.0, 4.0]];
    for (i, proj) in p.iter().enumerate() {
        let w = if i == 2 { Tensor::matrix(&[&wv[0], &wv[1]]).unwrap() } else { Tensor::identity(2) };
        store.set_value(proj.shared_weight(), w).unwrap();
        store.set_value(proj.bias().unwrap(), Tensor::zeros(&[2])).unwrap();
    }
    let x = [[1.0, 0.5], [-0.5, 2.0]];
    let got = eval(&store, |t| {
        let xv = t.constant(Tensor::matrix(&[&x[0], &x[1]])?)?;
        m.self_attention(t, lang(0), xv, false)
    });
    // Q = K = X, V = X·W_V, softmax(QKᵀ/√2)·V.
    let v: Vec<[f64; 2]> = x.iter().map(|r| [r[0] * wv[0][0] + r[1] * wv[1][0], r[0] * wv[0][1] + r[1] * wv[1][1]]).collect();
    for i in 0..2 {
        let s: Vec<f64> = (0..2).map(|j| (x[i][0] * x[j][0] + x[i][1] * x[j][1]) / 2f64.sqrt()).collect();
        let z = s[0].exp() + s[1].exp();
        let w = [s[0].exp() / z, s[1].exp() / z];
        for c in 0..2 {
            let expect = w[0] * v[0][c] + w[1] * v[1][c];
            assert!((got.at(i, c) - expect).abs() <= 1e-12);
        }
    }
}

#[test]
fn causal_output_ignores_later_positions() {
    let mut store = ParamStore::new();
    let block = FactorizedAttentionBlock::new(&mut store, "blk", AttentionDims { d_model: 4, heads: 2, d_ff: 8 }, false, FACTORIZED).unwrap();
    block.init(&mut store, &SeedTree::new(4)).unwrap();
    scramble(&mut store, 4, 0.5);
    let x = randn(&mut SeedTree::new(4).stream("x"), &[5, 4]);
    let run = |rows: usize| {
        eval(&store, |t| {
            let xv = t.constant(Tensor::new(vec![rows, 4], x.data()[..rows * 4].to_vec())?)?;
            block.forward(t, lang(0), xv, &AttentionPlan::self_attention(&[rows], true)?, None)
        })
    };
    let full = run(5);
    for rows in 1..5 {
        assert_eq!(&full.data()[..rows * 4], run(rows).data());
    }
}

#[test]
fn ffn_zero_weights_give_zero() {
    let mut store = ParamStore::new();
    let ffn = FeedForward::new(&mut store, "ffn", 4, 8, FACTORIZED).unwrap();
    let x = randn(&mut SeedTree::new(0).stream("x"), &[3, 4]);
    let y = eval(&store, |t| {
        let xv = t.constant(x.clone())?;
        ffn.forward(t, lang(0), xv)
    });
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn layer_norm_examples() {
    let out = |rows: &[&[f64]], gain: &[f64], bias: &[f64]| {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::matrix(rows).unwrap()).unwrap();
        let g = tape.constant(Tensor::vector(gain).unwrap()).unwrap();
        let b = tape.constant(Tensor::vector(bias).unwrap()).unwrap();
        let y = layer_norm(&mut tape, x, g, b).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(out(&[&[3.0, 3.0, 3.0]], &[2.0, 2.0, 2.0], &[0.1, 0.2, 0.3]).data(), &[0.1, 0.2, 0.3]);
    let y = out(&[&[1.0, -1.0]], &[1.0, 1.0], &[0.0, 0.0]);
    assert!((y.data()[0] - 1.0).abs() < 1e-5 && (y.data()[1] + 1.0).abs() < 1e-5);

    let mut rng = SeedTree::new(0).stream("ln");
    let x = randn(&mut rng, &[3, 5]);
    let (g, b) = (randn(&mut rng, &[5]), randn(&mut rng, &[5]));
    let rows: Vec<&[f64]> = x.data().chunks(5).collect();
    let y = out(&rows, g.data(), b.data());
    for r in 0..3 {
        let row = &x.data()[r * 5..(r + 1) * 5];
        let mean = row.iter().sum::<f64>() / 5.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        for c in 0..5 {
            let expect = g.data()[c] * (row[c] - mean) / (var + 1e-5).sqrt() + b.data()[c];
            assert!((y.at(r, c) - expect).abs() <= 1e-12);
        }
    }
}

/// Builds the same block twice, factorized and shared, from one seed.
fn twins<B>(seed: u64, build: impl Fn(&mut ParamStore<f64>, BlockSpec, &SeedTree) -> B) -> (ParamStore<f64>, B, ParamStore<f64>, B) {
    let seeds = SeedTree::new(seed);
    let mut fs = ParamStore::new();
    let f = build(&mut fs, FACTORIZED, &seeds);
    let mut ss = ParamStore::new();
    let s = build(&mut ss, SHARED, &seeds);
    (fs, f, ss, s)
}

#[test]
fn attention_blocks_reduce_to_shared_at_init() {
    let dims = AttentionDims { d_model: 8, heads: 2, d_ff: 16 };
    let (fs, f, ss, s) = twins(5, |store, spec, seeds| {
        let b = FactorizedAttentionBlock::new(store, "dec.layer0", dims, true, spec).unwrap();
        b.init(store, seeds).unwrap();
        b
    });
    let mut rng = SeedTree::new(5).stream("x");
    let (x, mem) = (randn(&mut rng, &[5, 8]), randn(&mut rng, &[7, 8]));
    let run = |store: &ParamStore<f64>, b: &FactorizedAttentionBlock, l: usize| {
        eval(store, |t| {
            let xv = t.constant(x.clone())?;
            let mv = t.constant(mem.clone())?;
            let cross = AttentionPlan::cross(&[2, 3], &[4, 3])?;
            b.forward(t, lang(l), xv, &AttentionPlan::self_attention(&[2, 3], true)?, Some((mv, &cross)))
        })
    };
    let base = run(&ss, &s, 0);
    for l in 0..3 {
        assert!(max_abs_diff(&run(&fs, &f, l), &base) <= 1e-12);
    }

    let (fs, f, ss, s) = twins(6, |store, spec, seeds| {
        let ffn = FeedForward::new(store, "ffn", 8, 16, spec).unwrap();
        ffn.init(store, seeds).unwrap();
        ffn
    });
    let ffn_out = |store: &ParamStore<f64>, b: &FeedForward, l: usize| {
        eval(store, |t| {
            let xv = t.constant(x.clone())?;
            b.forward(t, lang(l), xv)
        })
    };
    let base = ffn_out(&ss, &s, 0);
    for l in 0..3 {
        assert!(max_abs_diff(&ffn_out(&fs, &f, l), &base) <= 1e-12);
    }
}

#[test]
fn isolation_holds_through_attention_block() {
    let mut store = ParamStore::new();
    let block = FactorizedAttentionBlock::new(&mut store, "blk", AttentionDims { d_model: 4, heads: 2, d_ff: 8 }, false, FACTORIZED).unwrap();
    block.init(&mut store, &SeedTree::new(7)).unwrap();
    scramble(&mut store, 7, 0.5);
    let x = randn(&mut SeedTree::new(7).stream("x"), &[3, 4]);
    let out = |store: &ParamStore<f64>, l: usize| {
        eval(store, |t| {
            let xv = t.constant(x.clone())?;
            block.forward(t, lang(l), xv, &AttentionPlan::self_attention(&[3], false)?, None)
        })
    };
    let before: Vec<_> = (0..3).map(|l| out(&store, l)).collect();
    for p in block.projections() {
        for id in p.factorized().unwrap().language_params(lang(2)) {
            let t = store.value(id).map(|v| v + 0.3);
            store.set_value(id, t).unwrap();
        }
    }
    assert_eq!(out(&store, 0), before[0]);
    assert_eq!(out(&store, 1), before[1]);
    assert_ne!(out(&store, 2), before[2]);

    let mut tape = Tape::with_params(&store);
    let xv = tape.constant(x.clone()).unwrap();
    let y = block.forward(&mut tape, lang(0), xv, &AttentionPlan::self_attention(&[3], false).unwrap(), None).unwrap();
    let loss = weighted_sum(&mut tape, y, 0).unwrap();
    let grads = tape.backward(loss).unwrap();
    for p in block.projections() {
        for l in [1, 2] {
            for id in p.factorized().unwrap().language_params(lang(l)) {
                assert!(grads.get(id).is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));
            }
        }
    }
}

type Dd = DoubleDouble;

/// Central differences in `f64` bottom out around `1e-9` absolute, which
/// swamps the relative error of the smallest of several hundred gradient
/// entries. Running the same generic code in double-double arithmetic puts
/// the difference noise far below the truncation error.
fn gradcheck(store: &mut ParamStore<Dd>, f: impl Fn(&mut Tape<'_, Dd>) -> Result<Var>) {
    let report = finite_diff_check(store, None, f, Dd::from_f64(1e-6), 1e-5).unwrap();
    assert!(report.passed(), "{:?}", report.worst());
}

#[test]
fn gradcheck_blocks_across_seeds() {
    for seed in 0..3 {
        let mut rng = SeedTree::new(seed).stream("inputs");
        let x = randn(&mut rng, &[3, 4]).cast::<Dd>();

        let mut store = ParamStore::new();
        let cell = FactorizedLstmCell::new(&mut store, "cell", 4, 3, FACTORIZED).unwrap();
        cell.init(&mut store, &SeedTree::new(seed)).unwrap();
        scramble(&mut store, seed, 0.7);
        let (h, c) = (randn(&mut rng, &[3, 3]).cast::<Dd>(), randn(&mut rng, &[3, 3]).cast::<Dd>());
        gradcheck(&mut store, |t| {
            let (xv, hv, cv) = (t.constant(x.clone())?, t.constant(h.clone())?, t.constant(c.clone())?);
            let (h1, c1) = cell.step(t, lang(1), xv, hv, cv)?;
            let (h2, _) = cell.step(t, lang(1), xv, h1, c1)?;
            weighted_sum(t, h2, seed)
        });

        let mut store = ParamStore::new();
        let m = MultiHeadAttention::new(&mut store, "attn", 4, 2, FACTORIZED).unwrap();
        scramble(&mut store, seed, 0.7);
        gradcheck(&mut store, |t| {
            let xv = t.constant(x.clone())?;
            let y = m.self_attention(t, lang(0), xv, seed == 1)?;
            weighted_sum(t, y, seed)
        });

        let mut store = ParamStore::new();
        let ffn = FeedForward::new(&mut store, "ffn", 4, 8, FACTORIZED).unwrap();
        scramble(&mut store, seed, 0.7);
        gradcheck(&mut store, |t| {
            let xv = t.constant(x.clone())?;
            let y = ffn.forward(t, lang(2), xv)?;
            weighted_sum(t, y, seed)
        });

        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 4).unwrap();
        scramble(&mut store, seed, 1.0);
        gradcheck(&mut store, |t| {
            let xv = t.constant(x.clone())?;
            let y = ln.forward(t, xv)?;
            weighted_sum(t, y, seed)
        });

        let mut store = ParamStore::new();
        let dims = AttentionDims { d_model: 4, heads: 2, d_ff: 6 };
        let block = FactorizedAttentionBlock::new(&mut store, "blk", dims, true, FACTORIZED).unwrap();
        scramble(&mut store, seed, 0.7);
        let mem = randn(&mut rng, &[4, 4]).cast::<Dd>();
        gradcheck(&mut store, |t| {
            let xv = t.constant(x.clone())?;
            let mv = t.constant(mem.clone())?;
            let cross = AttentionPlan::cross(&[1, 2], &[3, 1])?;
            let y = block.forward(t, lang(0), xv, &AttentionPlan::self_attention(&[1, 2], true)?, Some((mv, &cross)))?;
            weighted_sum(t, y, seed)
        });
    }
}
