mod common;

use common::{brute_weight, max_abs_diff, randn, scramble};
use factorweights::diffcore::{finite_diff_check, ParamStore, Tape, Tensor};
use factorweights::factorlin::{Conditioning, LanguageId};
use factorweights::seq2seq::{Architecture, EncoderDecoderModel, ModelConfig, Utterance, BOS, EOS, FIRST_SYMBOL};
use factorweights::{DoubleDouble, Error, Scalar, SeedTree};

fn config(arch: Architecture, conditioning: Conditioning) -> ModelConfig {
    ModelConfig {
        architecture: arch,
        d_feat: 5,
        d_model: 8,
        symbols: 5,
        langs: 3,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        d_ff: 8,
        conditioning,
        positional: true,
        zero_output: false,
    }
}

const FACT: Conditioning = Conditioning::Factorized { rank: 1 };
const ARCHS: [Architecture; 2] = [Architecture::Lstm, Architecture::Attention];

fn utterance(seed: u64, frames: usize, symbols: &[usize], lang: usize, d_feat: usize) -> Utterance {
    let x = randn(&mut SeedTree::new(seed).stream("frames"), &[frames, d_feat]);
    let mut tokens = vec![BOS];
    tokens.extend(symbols.iter().map(|s| s + FIRST_SYMBOL));
    tokens.push(EOS);
    Utterance::new(x, tokens, LanguageId::new(lang)).unwrap()
}

fn loss<T: Scalar>(store: &ParamStore<T>, model: &EncoderDecoderModel, batch: &[&Utterance]) -> f64 {
    let mut tape = Tape::with_params(store);
    let l = model.batch_loss(&mut tape, batch).unwrap();
    tape.scalar(l).as_f64()
}

fn logits(store: &ParamStore<f64>, model: &EncoderDecoderModel, u: &Utterance) -> Tensor<f64> {
    let mut tape = Tape::with_params(store);
    let enc = model.encode(&mut tape, u.language, &[&u.frames]).unwrap();
    let inputs = &u.tokens[..u.tokens.len() - 1];
    let l = model.decode(&mut tape, u.language, &enc, &[inputs]).unwrap();
    tape.value(l).clone()
}

fn encode(store: &ParamStore<f64>, model: &EncoderDecoderModel, lang: usize, frames: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::with_params(store);
    let enc = model.encode(&mut tape, LanguageId::new(lang), &[frames]).unwrap();
    tape.value(enc.states).clone()
}

#[test]
fn single_frame_encodes_to_one_row() {
    for arch in ARCHS {
        let (store, model) = EncoderDecoderModel::build::<f64>(config(arch, FACT), 0).unwrap();
        let x = randn(&mut SeedTree::new(0).stream("x"), &[1, 5]);
        assert_eq!(encode(&store, &model, 0, &x).shape(), &[1, 8]);
        let bad = Tensor::zeros(&[2, 4]);
        let mut tape = Tape::with_params(&store);
        assert!(matches!(model.encode(&mut tape, LanguageId::new(0), &[&bad]), Err(Error::Shape { .. })));
    }
}

#[test]
fn identity_init_is_language_blind_and_matches_shared_model() {
    for arch in ARCHS {
        let (fs, f) = EncoderDecoderModel::build::<f64>(config(arch, FACT), 3).unwrap();
        let (ss, s) = EncoderDecoderModel::build::<f64>(config(arch, Conditioning::Shared), 3).unwrap();
        let u = utterance(1, 4, &[0, 3, 1], 0, 5);
        let enc0 = encode(&fs, &f, 0, &u.frames);
        let base_logits = logits(&ss, &s, &u);
        let base_loss = loss(&ss, &s, &[&u]);
        for l in 0..3 {
            let ul = Utterance { language: LanguageId::new(l), ..u.clone() };
            assert_eq!(encode(&fs, &f, l, &u.frames), enc0);
            assert!(max_abs_diff(&logits(&fs, &f, &ul), &base_logits) <= 1e-12);
            assert!((loss(&fs, &f, &[&ul]) - base_loss).abs() <= 1e-12);
        }
    }
}

#[test]
fn attention_encoder_without_positions_is_permutation_equivariant() {
    let mut cfg = config(Architecture::Attention, FACT);
    cfg.positional = false;
    let (mut store, model) = EncoderDecoderModel::build::<f64>(cfg, 4).unwrap();
    scramble(&mut store, 4, 0.5);
    let x = randn(&mut SeedTree::new(4).stream("x"), &[4, 5]);
    let perm = [2, 0, 3, 1];
    let mut px = Vec::new();
    for &p in &perm {
        px.extend_from_slice(x.row(p));
    }
    let px = Tensor::new(vec![4, 5], px).unwrap();
    let (a, b) = (encode(&store, &model, 1, &x), encode(&store, &model, 1, &px));
    for (i, &p) in perm.iter().enumerate() {
        let diff = a.row(p).iter().zip(b.row(i)).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-12);
    }
}

#[test]
fn decode_step_is_a_distribution() {
    for arch in ARCHS {
        let (mut store, model) = EncoderDecoderModel::build::<f64>(config(arch, FACT), 5).unwrap();
        scramble(&mut store, 5, 0.5);
        let u = utterance(5, 3, &[1, 2], 2, 5);
        let states = encode(&store, &model, 2, &u.frames);
        let p = model.decode_step(&store, LanguageId::new(2), &[BOS, 4, 5], &states).unwrap();
        assert_eq!(p.shape(), &[8]);
        assert!((p.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);

        let err = model.decode_step(&store, LanguageId::new(2), &[BOS, 8], &states).unwrap_err();
        assert!(matches!(err, Error::UnknownToken { token: 8, vocab: 8 }));
        let err = model.decode_step(&store, LanguageId::new(3), &[BOS], &states).unwrap_err();
        assert!(matches!(err, Error::LanguageOutOfRange { lang: 3, langs: 3 }));
    }
}

#[test]
fn zero_output_weights_give_uniform_predictions() {
    for arch in ARCHS {
        let mut cfg = config(arch, FACT);
        cfg.zero_output = true;
        let (store, model) = EncoderDecoderModel::build::<f64>(cfg, 6).unwrap();
        let u = utterance(6, 3, &[4, 0, 2], 1, 5);
        let states = encode(&store, &model, 1, &u.frames);
        let p = model.decode_step(&store, LanguageId::new(1), &[BOS, 3], &states).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 8.0).abs() <= 1e-15));
        assert!((loss(&store, &model, &[&u]) - 8f64.ln()).abs() <= 1e-12);
    }
}

#[test]
fn output_forcing_eos_stops_after_one_step() {
    for arch in ARCHS {
        let mut cfg = config(arch, FACT);
        cfg.zero_output = true;
        let (mut store, model) = EncoderDecoderModel::build::<f64>(cfg, 7).unwrap();
        let bias = store.find("output.b_S").unwrap();
        let mut b = vec![0.0; 8];
        b[EOS] = 5.0;
        store.set_value(bias, Tensor::vector(&b).unwrap()).unwrap();
        let u = utterance(7, 3, &[1], 0, 5);
        assert_eq!(model.greedy_decode(&store, LanguageId::new(0), &u.frames, 10).unwrap(), vec![EOS]);

        // A symbol beats EOS: decoding runs to max_len, including max_len = 1.
        b[EOS] = 0.0;
        b[FIRST_SYMBOL + 2] = 5.0;
        store.set_value(bias, Tensor::vector(&b).unwrap()).unwrap();
        assert_eq!(model.greedy_decode(&store, LanguageId::new(0), &u.frames, 1).unwrap(), vec![5]);
        assert_eq!(model.greedy_decode(&store, LanguageId::new(0), &u.frames, 3).unwrap(), vec![5, 5, 5]);
        assert!(model.greedy_decode(&store, LanguageId::new(0), &u.frames, 0).is_err());
    }
}

#[test]
fn packed_batches_match_single_utterances() {
    for arch in ARCHS {
        let (mut store, model) = EncoderDecoderModel::build::<f64>(config(arch, FACT), 8).unwrap();
        scramble(&mut store, 8, 0.5);
        let us = [
            utterance(10, 4, &[0, 1, 2], 1, 5),
            utterance(11, 2, &[3], 1, 5),
            utterance(12, 6, &[4, 4, 0, 1, 2], 1, 5),
        ];
        let refs: Vec<&Utterance> = us.iter().collect();
        let batch = loss(&store, &model, &refs);
        let total: usize = us.iter().map(|u| u.tokens.len() - 1).sum();
        let weighted: f64 = us.iter().map(|u| loss(&store, &model, &[u]) * (u.tokens.len() - 1) as f64).sum();
        assert!((batch - weighted / total as f64).abs() <= 1e-12);

        let frames: Vec<&Tensor<f64>> = us.iter().map(|u| &u.frames).collect();
        let lang = LanguageId::new(1);
        let together = model.greedy_decode_batch(&store, lang, &frames, &[4, 2, 6]).unwrap();
        for (i, u) in us.iter().enumerate() {
            assert_eq!(together[i], model.greedy_decode(&store, lang, &u.frames, [4, 2, 6][i]).unwrap());
        }
    }
}

#[test]
fn mixed_language_batches_and_empty_targets_are_rejected() {
    let (store, model) = EncoderDecoderModel::build::<f64>(config(Architecture::Lstm, FACT), 0).unwrap();
    let (a, b) = (utterance(1, 3, &[1], 0, 5), utterance(2, 3, &[1], 1, 5));
    let mut tape = Tape::with_params(&store);
    assert!(model.batch_loss(&mut tape, &[&a, &b]).is_err());
    let empty = Utterance { tokens: vec![BOS, EOS], ..a.clone() };
    assert!(model.sequence_loss(&mut tape, &empty).is_err());
    assert!(Utterance::new(a.frames.clone(), vec![BOS, EOS], LanguageId::new(0)).is_err());
}

#[test]
fn teacher_forced_logits_are_causal() {
    for arch in ARCHS {
        let (mut store, model) = EncoderDecoderModel::build::<f64>(config(arch, FACT), 9).unwrap();
        scramble(&mut store, 9, 0.5);
        let u = utterance(9, 4, &[0, 1, 2, 3], 2, 5);
        let base = logits(&store, &model, &u);
        for i in 1..u.tokens.len() - 1 {
            let mut changed = u.clone();
            for t in changed.tokens[i + 1..].iter_mut() {
                *t = FIRST_SYMBOL + (*t + 1) % 5;
            }
            let other = logits(&store, &model, &changed);
            assert_eq!(&base.data()[..(i + 1) * 8], &other.data()[..(i + 1) * 8], "{arch} position {i}");
        }
    }
}

#[test]
fn loss_is_deterministic_for_a_seed() {
    for arch in ARCHS {
        let u = utterance(3, 5, &[2, 2, 1], 1, 5);
        let run = || {
            let (mut store, model) = EncoderDecoderModel::build::<f64>(config(arch, FACT), 11).unwrap();
            scramble(&mut store, 11, 0.5);
            loss(&store, &model, &[&u]).to_bits()
        };
        assert_eq!(run(), run());
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn affine(x: &[f64], w: &[Vec<f64>], b: Option<&[f64]>) -> Vec<f64> {
    let mut y: Vec<f64> = (0..w[0].len()).map(|j| b.map_or(0.0, |b| b[j])).collect();
    for (i, xi) in x.iter().enumerate() {
        for (j, yj) in y.iter_mut().enumerate() {
            *yj += xi * w[i][j];
        }
    }
    y
}

#[test]
fn toy_model_matches_scalar_trace() {
    let cfg = ModelConfig {
        architecture: Architecture::Lstm,
        d_feat: 2,
        d_model: 2,
        symbols: 3,
        langs: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 1,
        d_ff: 2,
        conditioning: FACT,
        positional: false,
        zero_output: false,
    };
    let (mut store, model) = EncoderDecoderModel::build::<f64>(cfg, 0).unwrap();
    scramble(&mut store, 0, 0.8);
    let l = 1;
    let u = utterance(0, 3, &[2, 0], l, 2);
    let history = [BOS, FIRST_SYMBOL + 2];

    let p = model.projections();
    let w: Vec<_> = p.iter().map(|p| brute_weight(&store, p, l)).collect();
    let bias = |id: Option<factorweights::diffcore::ParamId>| id.map(|id| store.value(id).data().to_vec());
    let b: Vec<_> = p.iter().map(|p| bias(p.bias())).collect();
    let gate_bias = |side: &str, g: &str| store.value(store.find(&format!("{side}.layer0.b_{g}")).unwrap()).data().to_vec();

    // Projection order: input, encoder W_{f,i,c,o}x then W_{f,i,c,o}h,
    // decoder likewise, bridge Q K V O, output.
    let lstm = |xs: &[Vec<f64>], base: usize, side: &str| {
        let (mut h, mut c) = (vec![0.0; 2], vec![0.0; 2]);
        let mut out = Vec::new();
        for x in xs {
            let pre: Vec<Vec<f64>> = ["f", "i", "c", "o"]
                .iter()
                .enumerate()
                .map(|(g, name)| {
                    let a = affine(x, &w[base + g], Some(&gate_bias(side, name)));
                    let r = affine(&h, &w[base + 4 + g], None);
                    a.iter().zip(r).map(|(a, r)| a + r).collect()
                })
                .collect();
            for j in 0..2 {
                let (f, i, cand, o) = (sigmoid(pre[0][j]), sigmoid(pre[1][j]), pre[2][j].tanh(), sigmoid(pre[3][j]));
                c[j] = f * c[j] + i * cand;
                h[j] = o * c[j].tanh();
            }
            out.push(h.clone());
        }
        out
    };
    let xs: Vec<Vec<f64>> = (0..3).map(|t| affine(u.frames.row(t), &w[0], b[0].as_deref())).collect();
    let hx = lstm(&xs, 1, "encoder");
    let emb = store.value(model.embedding());
    let ys: Vec<Vec<f64>> = history.iter().map(|&t| emb.row(t).to_vec()).collect();
    let hy = lstm(&ys, 9, "decoder");
    let h = hy.last().unwrap();
    let q = affine(h, &w[17], b[17].as_deref());
    let keys: Vec<_> = hx.iter().map(|x| affine(x, &w[18], b[18].as_deref())).collect();
    let vals: Vec<_> = hx.iter().map(|x| affine(x, &w[19], b[19].as_deref())).collect();
    let scores: Vec<f64> = keys.iter().map(|k| (q[0] * k[0] + q[1] * k[1]) / 2f64.sqrt()).collect();
    let z: f64 = scores.iter().map(|s| s.exp()).sum();
    let mut ctx = vec![0.0; 2];
    for (s, v) in scores.iter().zip(&vals) {
        for j in 0..2 {
            ctx[j] += s.exp() / z * v[j];
        }
    }
    let c = affine(&ctx, &w[20], b[20].as_deref());
    let sum: Vec<f64> = c.iter().zip(h).map(|(c, h)| c + h).collect();
    let logits = affine(&sum, &w[21], b[21].as_deref());
    let zl: f64 = logits.iter().map(|v| v.exp()).sum();
    let expect: Vec<f64> = logits.iter().map(|v| v.exp() / zl).collect();

    let states = encode(&store, &model, l, &u.frames);
    let got = model.decode_step(&store, LanguageId::new(l), &history, &states).unwrap();
    for (g, e) in got.data().iter().zip(&expect) {
        assert!((g - e).abs() <= 1e-12, "{g} vs {e}");
    }
}

#[test]
fn sequence_loss_gradcheck() {
    for arch in ARCHS {
        for seed in 0..3 {
            let mut cfg = config(arch, FACT);
            cfg.langs = 2;
            let (mut store, model) = EncoderDecoderModel::build::<DoubleDouble>(cfg, seed).unwrap();
            scramble(&mut store, seed, 0.5);
            let u = utterance(seed, 3, &[1, 4, 0], 1, 5);
            let report = finite_diff_check(
                &mut store,
                None,
                |t| model.sequence_loss(t, &u),
                DoubleDouble::from_f64(1e-6),
                1e-5,
            )
            .unwrap();
            assert!(report.passed(), "{arch} seed {seed}: {:?}", report.worst());
        }
    }
}
