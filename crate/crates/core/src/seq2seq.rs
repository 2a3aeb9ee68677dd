//! Attention-based encoder-decoder:
//!
//! ```text
//! h^X = ENCODER(x_1..x_N)
//! h^Y_i = DECODER(y_<i)
//! c_i = Attn(h^Y_i, h^X)
//! o_i = softmax(W_out (c_i + h^Y_i))
//! ```
//!
//! The encoder and decoder cores are either stacks of LSTM cells or
//! pre-norm attention blocks; every linear map is conditioned on the
//! utterance language. Utterances of one batch share a language and are
//! packed row after row.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};

use crate::blocks::{AttentionDims, BlockSpec, FactorizedAttentionBlock, FactorizedLstmCell, LayerNorm, MultiHeadAttention};
use crate::diffcore::{AttentionPlan, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::factorlin::{Conditioning, LanguageId, Projection};
use crate::rng::SeedTree;
use crate::scalar::Scalar;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// Token id of symbol 0; symbol `a` is token `a + FIRST_SYMBOL`.
pub const FIRST_SYMBOL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    Lstm,
    Attention,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Lstm => "lstm",
            Architecture::Attention => "attention",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(Architecture::Lstm),
            "attention" => Ok(Architecture::Attention),
            other => Err(Error::invalid(format!("unknown architecture {other:?} (expected lstm or attention)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Width of input frames.
    pub d_feat: usize,
    pub d_model: usize,
    /// Number of output symbols, excluding PAD, BOS and EOS.
    pub symbols: usize,
    pub langs: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Attention heads, used by the bridge attention of both architectures.
    pub heads: usize,
    pub d_ff: usize,
    pub conditioning: Conditioning,
    /// Add sinusoidal position encodings to encoder and decoder inputs.
    pub positional: bool,
    /// Start with a zero output weight, so every distribution is uniform.
    pub zero_output: bool,
}

impl ModelConfig {
    pub fn vocab(&self) -> usize {
        self.symbols + FIRST_SYMBOL
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_feat", self.d_feat),
            ("d_model", self.d_model),
            ("symbols", self.symbols),
            ("langs", self.langs),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("model {name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!("{} heads do not divide d_model = {}", self.heads, self.d_model)));
        }
        if let Conditioning::Factorized { rank: 0 } = self.conditioning {
            return Err(Error::invalid("factor rank must be positive"));
        }
        Ok(())
    }

    fn spec(&self) -> BlockSpec {
        BlockSpec {
            langs: self.langs,
            conditioning: self.conditioning,
        }
    }
}

/// One input-output pair: frames `[N × D_feat]` and tokens `BOS … EOS`.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub frames: Tensor<f64>,
    pub tokens: Vec<usize>,
    pub language: LanguageId,
}

impl Utterance {
    pub fn new(frames: Tensor<f64>, tokens: Vec<usize>, language: LanguageId) -> Result<Self> {
        if frames.rank() != 2 || frames.rows() == 0 {
            return Err(Error::invalid(format!("utterance frames must be a non-empty matrix, got {:?}", frames.shape())));
        }
        if tokens.len() < 3 || tokens[0] != BOS || tokens[tokens.len() - 1] != EOS {
            return Err(Error::invalid("utterance tokens must be BOS, at least one symbol, EOS"));
        }
        Ok(Self {
            frames,
            tokens,
            language,
        })
    }

    /// Tokens strictly between BOS and EOS.
    pub fn symbols(&self) -> &[usize] {
        &self.tokens[1..self.tokens.len() - 1]
    }
}

/// `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(…)`.
pub fn sinusoid<T: Scalar>(len: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * d);
    for p in 0..len {
        for j in 0..d {
            let angle = p as f64 / 10000f64.powf((j - j % 2) as f64 / d as f64);
            data.push(T::lit(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::from_raw(vec![len, d], data)
}

#[derive(Clone, Debug)]
enum Core {
    Lstm(Vec<FactorizedLstmCell>),
    Attention {
        blocks: Vec<FactorizedAttentionBlock>,
        norm: LayerNorm,
    },
}

/// Encoder states of a packed batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub states: Var,
    pub lens: Vec<usize>,
}

/// Maps between packed rows and the right-padded time-major layout an LSTM
/// stack runs on. Padding rows read from an appended zero row.
struct TimeMajor {
    batch: usize,
    to_time: Vec<usize>,
    to_packed: Vec<usize>,
}

impl TimeMajor {
    fn new(lens: &[usize]) -> Self {
        let batch = lens.len();
        let steps = lens.iter().copied().max().unwrap_or(0);
        let total: usize = lens.iter().sum();
        let offsets: Vec<usize> = lens
            .iter()
            .scan(0, |acc, &l| {
                let o = *acc;
                *acc += l;
                Some(o)
            })
            .collect();
        let mut to_time = Vec::with_capacity(steps * batch);
        for t in 0..steps {
            for (b, &l) in lens.iter().enumerate() {
                to_time.push(if t < l { offsets[b] + t } else { total });
            }
        }
        let mut to_packed = Vec::with_capacity(total);
        for (b, &l) in lens.iter().enumerate() {
            to_packed.extend((0..l).map(|t| t * batch + b));
        }
        Self {
            batch,
            to_time,
            to_packed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderDecoderModel {
    config: ModelConfig,
    input: Projection,
    encoder: Core,
    embedding: ParamId,
    decoder: Core,
    bridge: MultiHeadAttention,
    output: Projection,
}

impl EncoderDecoderModel {
    /// Registers all parameters; call [`init`](Self::init) before use.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let spec = config.spec();
        let d = config.d_model;
        let input = Projection::new(store, "input", config.d_feat, d, config.langs, config.conditioning, true)?;
        let encoder = Self::core(store, &config, "encoder", config.encoder_layers, false)?;
        let embedding = store.add("embedding", Tensor::zeros(&[config.vocab(), d]))?;
        let decoder = Self::core(store, &config, "decoder", config.decoder_layers, true)?;
        let bridge = MultiHeadAttention::new(store, "bridge", d, config.heads, spec)?;
        let output = Projection::new(store, "output", d, config.vocab(), config.langs, config.conditioning, true)?;
        Ok(Self {
            config,
            input,
            encoder,
            embedding,
            decoder,
            bridge,
            output,
        })
    }

    fn core<T: Scalar>(store: &mut ParamStore<T>, config: &ModelConfig, side: &str, layers: usize, decoder: bool) -> Result<Core> {
        let d = config.d_model;
        Ok(match config.architecture {
            Architecture::Lstm => Core::Lstm(
                (0..layers)
                    .map(|i| FactorizedLstmCell::new(store, &format!("{side}.layer{i}"), d, d, config.spec()))
                    .collect::<Result<_>>()?,
            ),
            Architecture::Attention => {
                let dims = AttentionDims {
                    d_model: d,
                    heads: config.heads,
                    d_ff: config.d_ff,
                };
                Core::Attention {
                    blocks: (0..layers)
                        .map(|i| FactorizedAttentionBlock::new(store, &format!("{side}.layer{i}"), dims, decoder, config.spec()))
                        .collect::<Result<_>>()?,
                    norm: LayerNorm::new(store, &format!("{side}.norm"), d)?,
                }
            }
        })
    }

    /// Builds and initializes a model in a fresh store.
    pub fn build<T: Scalar>(config: ModelConfig, seed: u64) -> Result<(ParamStore<T>, Self)> {
        let mut store = ParamStore::new();
        let model = Self::new(&mut store, config)?;
        model.init(&mut store, &SeedTree::new(seed))?;
        Ok((store, model))
    }

    /// Identity initialization for factorized maps, Xavier for shared ones,
    /// `N(0, 1)` embeddings. Streams are keyed by parameter name, so a
    /// factorized model and its shared baseline draw identical shared weights.
    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seeds: &SeedTree) -> Result<()> {
        self.input.init(store, seeds)?;
        for core in [&self.encoder, &self.decoder] {
            match core {
                Core::Lstm(cells) => cells.iter().try_for_each(|c| c.init(store, seeds))?,
                Core::Attention { blocks, norm } => {
                    blocks.iter().try_for_each(|b| b.init(store, seeds))?;
                    norm.init(store)?;
                }
            }
        }
        let normal = Normal::new(0.0, 1.0).expect("valid normal");
        let mut rng = seeds.stream("embedding");
        let shape = [self.config.vocab(), self.config.d_model];
        let data = (0..shape[0] * shape[1]).map(|_| T::lit(normal.sample(&mut rng))).collect();
        store.set_value(self.embedding, Tensor::new(shape.to_vec(), data)?)?;
        self.bridge.init(store, seeds)?;
        self.output.init(store, seeds)?;
        if self.config.zero_output {
            let w = self.output.shared_weight();
            let shape = store.value(w).shape().to_vec();
            store.set_value(w, Tensor::zeros(&shape))?;
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embedding(&self) -> ParamId {
        self.embedding
    }

    /// Every conditioned linear map of the model.
    pub fn projections(&self) -> Vec<&Projection> {
        let mut out = vec![&self.input];
        for core in [&self.encoder, &self.decoder] {
            match core {
                Core::Lstm(cells) => out.extend(cells.iter().flat_map(|c| c.projections())),
                Core::Attention { blocks, .. } => out.extend(blocks.iter().flat_map(|b| b.projections())),
            }
        }
        out.extend(self.bridge.projections());
        out.push(&self.output);
        out
    }

    /// Factor parameters added per language, summed over all projections.
    pub fn added_params_per_language(&self) -> usize {
        self.projections()
            .iter()
            .filter_map(|p| p.param_overhead())
            .map(|o| o.per_language_added)
            .sum()
    }

    fn check_language(&self, lang: LanguageId) -> Result<()> {
        lang.check(self.config.langs)
    }

    fn run_core<T: Scalar>(
        &self,
        core: &Core,
        tape: &mut Tape<'_, T>,
        lang: LanguageId,
        x: Var,
        lens: &[usize],
        memory: Option<(Var, &[usize])>,
    ) -> Result<Var> {
        match core {
            Core::Lstm(cells) => {
                let layout = TimeMajor::new(lens);
                let zero = tape.constant(Tensor::zeros(&[1, self.config.d_model]))?;
                let padded = tape.concat_rows(&[x, zero])?;
                let mut h = tape.gather_rows(padded, &layout.to_time)?;
                for cell in cells {
                    h = cell.run(tape, lang, h, layout.batch)?;
                }
                tape.gather_rows(h, &layout.to_packed)
            }
            Core::Attention { blocks, norm } => {
                let plan = AttentionPlan::self_attention(lens, memory.is_some())?;
                let cross = match memory {
                    Some((_, mem_lens)) => Some(AttentionPlan::cross(lens, mem_lens)?),
                    None => None,
                };
                let mut h = x;
                for block in blocks {
                    let mem = memory.map(|(m, _)| m).zip(cross.as_ref());
                    h = block.forward(tape, lang, h, &plan, mem)?;
                }
                norm.forward(tape, h)
            }
        }
    }

    fn add_positions<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, lens: &[usize]) -> Result<Var> {
        if !self.config.positional {
            return Ok(x);
        }
        let d = self.config.d_model;
        let longest = lens.iter().copied().max().unwrap_or(0);
        let table = sinusoid::<T>(longest, d);
        let mut data = Vec::with_capacity(lens.iter().sum::<usize>() * d);
        for &l in lens {
            data.extend_from_slice(&table.data()[..l * d]);
        }
        let pe = tape.constant(Tensor::from_raw(vec![data.len() / d, d], data))?;
        tape.add(x, pe)
    }

    /// Encodes a monolingual batch of frame matrices into packed states.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<'_, T>, lang: LanguageId, frames: &[&Tensor<f64>]) -> Result<Encoded> {
        self.check_language(lang)?;
        if frames.is_empty() {
            return Err(Error::invalid("encode needs at least one utterance"));
        }
        let mut lens = Vec::with_capacity(frames.len());
        let mut data = Vec::new();
        for f in frames {
            if f.rank() != 2 || f.cols() != self.config.d_feat || f.rows() == 0 {
                return Err(Error::shape("encode", f.shape(), &[0, self.config.d_feat]));
            }
            lens.push(f.rows());
            data.extend(f.data().iter().map(|&v| T::lit(v)));
        }
        let x = tape.constant(Tensor::new(vec![lens.iter().sum(), self.config.d_feat], data)?)?;
        let x = self.input.forward(tape, lang, x)?;
        let x = self.add_positions(tape, x, &lens)?;
        let states = self.run_core(&self.encoder, tape, lang, x, &lens, None)?;
        Ok(Encoded { states, lens })
    }

    /// Teacher-forced logits `[Σ len × vocab]` for packed decoder inputs.
    pub fn decode<T: Scalar>(&self, tape: &mut Tape<'_, T>, lang: LanguageId, enc: &Encoded, inputs: &[&[usize]]) -> Result<Var> {
        self.check_language(lang)?;
        if inputs.len() != enc.lens.len() {
            return Err(Error::shape("decode", &[inputs.len()], &[enc.lens.len()]));
        }
        let vocab = self.config.vocab();
        let mut tokens = Vec::new();
        let mut lens = Vec::with_capacity(inputs.len());
        for seq in inputs {
            if seq.is_empty() {
                return Err(Error::invalid("decoder history must start with BOS"));
            }
            if let Some(&t) = seq.iter().find(|&&t| t >= vocab) {
                return Err(Error::UnknownToken { token: t, vocab });
            }
            tokens.extend_from_slice(seq);
            lens.push(seq.len());
        }
        let table = tape.param(self.embedding)?;
        let y = tape.gather_rows(table, &tokens)?;
        let y = self.add_positions(tape, y, &lens)?;
        let h = self.run_core(&self.decoder, tape, lang, y, &lens, Some((enc.states, &enc.lens)))?;
        let plan = AttentionPlan::cross(&lens, &enc.lens)?;
        let c = self.bridge.forward(tape, lang, h, enc.states, &plan)?;
        let sum = tape.add(c, h)?;
        self.output.forward(tape, lang, sum)
    }

    /// Mean token cross-entropy of a monolingual batch under teacher forcing.
    pub fn batch_loss<T: Scalar>(&self, tape: &mut Tape<'_, T>, batch: &[&Utterance]) -> Result<Var> {
        let lang = match batch.first() {
            Some(u) => u.language,
            None => return Err(Error::invalid("empty batch")),
        };
        if let Some(u) = batch.iter().find(|u| u.language != lang) {
            return Err(Error::invalid(format!(
                "batch mixes languages {} and {}",
                lang.index(),
                u.language.index()
            )));
        }
        let mut inputs = Vec::with_capacity(batch.len());
        let mut targets = Vec::new();
        for u in batch {
            if u.tokens.len() < 3 {
                return Err(Error::invalid("utterance has an empty target"));
            }
            inputs.push(&u.tokens[..u.tokens.len() - 1]);
            targets.extend_from_slice(&u.tokens[1..]);
        }
        let frames: Vec<&Tensor<f64>> = batch.iter().map(|u| &u.frames).collect();
        let enc = self.encode(tape, lang, &frames)?;
        let logits = self.decode(tape, lang, &enc, &inputs)?;
        tape.cross_entropy(logits, &targets, PAD)
    }

    pub fn sequence_loss<T: Scalar>(&self, tape: &mut Tape<'_, T>, utterance: &Utterance) -> Result<Var> {
        self.batch_loss(tape, &[utterance])
    }

    /// Next-token distribution after `history` given fixed encoder states.
    pub fn decode_step<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        lang: LanguageId,
        history: &[usize],
        encoder_states: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::inference(store);
        let states = tape.constant(encoder_states.clone())?;
        let enc = Encoded {
            states,
            lens: vec![encoder_states.rows()],
        };
        let logits = self.decode(&mut tape, lang, &enc, &[history])?;
        let rows = tape.value(logits).rows();
        let last = tape.slice_rows(logits, rows - 1, rows)?;
        let probs = tape.softmax(last)?;
        tape.value(probs).clone().reshape(&[self.config.vocab()])
    }

    pub fn greedy_decode<T: Scalar>(&self, store: &ParamStore<T>, lang: LanguageId, frames: &Tensor<f64>, max_len: usize) -> Result<Vec<usize>> {
        Ok(self.greedy_decode_batch(store, lang, &[frames], &[max_len])?.remove(0))
    }

    /// Decodes a monolingual batch in lockstep. Each output holds the argmax
    /// tokens up to and including EOS, or `max_lens[b]` tokens. PAD and BOS
    /// are never emitted; ties go to the lowest token id.
    pub fn greedy_decode_batch<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        lang: LanguageId,
        frames: &[&Tensor<f64>],
        max_lens: &[usize],
    ) -> Result<Vec<Vec<usize>>> {
        if frames.len() != max_lens.len() {
            return Err(Error::shape("greedy_decode", &[frames.len()], &[max_lens.len()]));
        }
        if max_lens.contains(&0) {
            return Err(Error::invalid("max_len must be at least 1"));
        }
        let mut tape = Tape::inference(store);
        let enc = self.encode(&mut tape, lang, frames)?;
        let batch = frames.len();
        let mut histories = vec![vec![BOS]; batch];
        let mut outputs = vec![Vec::new(); batch];
        let mut done = vec![false; batch];
        let steps = max_lens.iter().copied().max().unwrap_or(0);
        for _ in 0..steps {
            let inputs: Vec<&[usize]> = histories.iter().map(Vec::as_slice).collect();
            let logits = self.decode(&mut tape, lang, &enc, &inputs)?;
            let logits = tape.value(logits);
            let len = histories[0].len();
            for b in 0..batch {
                let row = logits.row(b * len + len - 1);
                let token = argmax_output(row);
                histories[b].push(token);
                if !done[b] {
                    outputs[b].push(token);
                    done[b] = token == EOS || outputs[b].len() >= max_lens[b];
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(outputs)
    }
}

fn argmax_output<T: Scalar>(row: &[T]) -> usize {
    let mut best = EOS;
    for (t, &v) in row.iter().enumerate().skip(EOS + 1) {
        if v > row[best] {
            best = t;
        }
    }
    best
}
