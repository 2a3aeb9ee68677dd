//! Sequence-model building blocks. Every linear map is a [`Projection`], so
//! the same code builds the factorized model and its fully-shared baseline.

use crate::diffcore::{AttentionPlan, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::factorlin::{Conditioning, LanguageId, Projection};
use crate::rng::SeedTree;
use crate::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Sizes and conditioning shared by every projection of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub langs: usize,
    pub conditioning: Conditioning,
}

/// `gain ⊙ (x − mean) / sqrt(var + ε) + bias` per row.
pub fn layer_norm<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let z = tape.standardize(x, T::lit(LAYER_NORM_EPS))?;
    let z = tape.row_scale(z, gain)?;
    tape.add_bias(z, bias)
}

/// Layer normalization with shared gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
    dim: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, path: &str, dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid(format!("{path}: layer norm needs at least 2 features")));
        }
        Ok(Self {
            gain: store.add(format!("{path}.gain"), Tensor::ones(&[dim]))?,
            bias: store.add(format!("{path}.bias"), Tensor::zeros(&[dim]))?,
            dim,
        })
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        store.set_value(self.gain, Tensor::ones(&[self.dim]))?;
        store.set_value(self.bias, Tensor::zeros(&[self.dim]))
    }

    pub fn gain(&self) -> ParamId {
        self.gain
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(self.gain)?, tape.param(self.bias)?);
        layer_norm(tape, x, g, b)
    }
}

const GATES: [&str; 4] = ["f", "i", "c", "o"];
const X_GATE: &str = "lstm gate W_fx";
const H_GATE: &str = "lstm gate W_fh";

/// LSTM cell with eight conditioned maps and shared gate biases.
///
/// ```text
/// f = σ(x W_fx + h W_fh + b_f)    i = σ(x W_ix + h W_ih + b_i)
/// ĉ = tanh(x W_cx + h W_ch + b_c) o = σ(x W_ox + h W_oh + b_o)
/// c' = f ⊙ c + i ⊙ ĉ              h' = o ⊙ tanh(c')
/// ```
#[derive(Clone, Debug)]
pub struct FactorizedLstmCell {
    d_x: usize,
    d_h: usize,
    // Gate order f, i, c, o.
    wx: [Projection; 4],
    wh: [Projection; 4],
    b: [ParamId; 4],
}

impl FactorizedLstmCell {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, path: &str, d_x: usize, d_h: usize, spec: BlockSpec) -> Result<Self> {
        let mut maps = |suffix: char, d_in: usize| -> Result<Vec<Projection>> {
            GATES
                .iter()
                .map(|g| {
                    let name = format!("{path}.W_{g}{suffix}");
                    Projection::new(store, &name, d_in, d_h, spec.langs, spec.conditioning, false)
                })
                .collect()
        };
        let wx: [Projection; 4] = maps('x', d_x)?.try_into().expect("four gates");
        let wh: [Projection; 4] = maps('h', d_h)?.try_into().expect("four gates");
        let b: Vec<ParamId> = GATES
            .iter()
            .map(|g| store.add(format!("{path}.b_{g}"), Tensor::zeros(&[d_h])))
            .collect::<Result<_>>()?;
        let b: [ParamId; 4] = b.try_into().expect("four gates");
        Ok(Self { d_x, d_h, wx, wh, b })
    }

    /// Conditioned maps as for every projection; gate biases zero except
    /// the forget bias, which starts at one.
    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seeds: &SeedTree) -> Result<()> {
        for p in self.wx.iter().chain(&self.wh) {
            p.init(store, seeds)?;
        }
        for (g, &b) in self.b.iter().enumerate() {
            let v = if g == 0 { T::one() } else { T::zero() };
            store.set_value(b, Tensor::full(&[self.d_h], v))?;
        }
        Ok(())
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn d_h(&self) -> usize {
        self.d_h
    }

    pub fn projections(&self) -> impl Iterator<Item = &Projection> {
        self.wx.iter().chain(&self.wh)
    }

    pub fn gate_biases(&self) -> [ParamId; 4] {
        self.b
    }

    /// One time step through the eight projections.
    pub fn step<T: Scalar>(&self, tape: &mut Tape<'_, T>, lang: LanguageId, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        // A width mismatch hits the first gate that consumes the tensor.
        let rows = tape.value(x).rows();
        if tape.shape(x) != [rows, self.d_x] {
            return Err(Error::shape(X_GATE, tape.shape(x), &[rows, self.d_x]));
        }
        if tape.shape(h) != [rows, self.d_h] {
            return Err(Error::shape(H_GATE, tape.shape(h), &[rows, self.d_h]));
        }
        if tape.shape(c) != [rows, self.d_h] {
            return Err(Error::shape("lstm cell state", tape.shape(c), &[rows, self.d_h]));
        }
        let mut pre = Vec::with_capacity(4);
        for g in 0..4 {
            let a = self.wx[g].forward(tape, lang, x)?;
            let r = self.wh[g].forward(tape, lang, h)?;
            let s = tape.add(a, r)?;
            let b = tape.param(self.b[g])?;
            pre.push(tape.add_bias(s, b)?);
        }
        self.update(tape, [pre[0], pre[1], pre[2], pre[3]], c)
    }

    fn update<T: Scalar>(&self, tape: &mut Tape<'_, T>, pre: [Var; 4], c: Var) -> Result<(Var, Var)> {
        let f = tape.sigmoid(pre[0])?;
        let i = tape.sigmoid(pre[1])?;
        let cand = tape.tanh(pre[2])?;
        let o = tape.sigmoid(pre[3])?;
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, cand)?;
        let c_new = tape.add(keep, write)?;
        let squashed = tape.tanh(c_new)?;
        let h_new = tape.mul(o, squashed)?;
        Ok((h_new, c_new))
    }

    /// Runs the cell over a time-major input of `steps` blocks of `batch`
    /// rows from zero state, returning every hidden state in the same layout.
    ///
    /// Numerically this is `steps` calls of [`step`](Self::step); the four
    /// input maps and the four hidden maps are each fused into one matmul
    /// against the column-concatenated effective weights.
    pub fn run<T: Scalar>(&self, tape: &mut Tape<'_, T>, lang: LanguageId, xs: Var, batch: usize) -> Result<Var> {
        let (rows, d_x) = match tape.shape(xs) {
            &[r, d] => (r, d),
            other => return Err(Error::shape(X_GATE, other, &[0, self.d_x])),
        };
        if d_x != self.d_x || batch == 0 || rows % batch != 0 {
            return Err(Error::shape(X_GATE, &[rows, d_x], &[batch, self.d_x]));
        }
        let steps = rows / batch;
        let wx: Vec<Var> = self.wx.iter().map(|p| p.weight(tape, lang)).collect::<Result<_>>()?;
        let wh: Vec<Var> = self.wh.iter().map(|p| p.weight(tape, lang)).collect::<Result<_>>()?;
        let bs: Vec<Var> = self.b.iter().map(|&b| tape.param(b)).collect::<Result<_>>()?;
        let wx = tape.concat_cols(&wx)?;
        let wh = tape.concat_cols(&wh)?;
        let b = tape.concat_cols(&bs)?;
        let input = tape.matmul(xs, wx)?;
        let input = tape.add_bias(input, b)?;

        let d = self.d_h;
        let mut h = tape.constant(Tensor::zeros(&[batch, d]))?;
        let mut c = h;
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let x_part = tape.slice_rows(input, t * batch, (t + 1) * batch)?;
            let pre = if t == 0 {
                x_part
            } else {
                let r = tape.matmul(h, wh)?;
                tape.add(x_part, r)?
            };
            let gates = [
                tape.slice_cols(pre, 0, d)?,
                tape.slice_cols(pre, d, 2 * d)?,
                tape.slice_cols(pre, 2 * d, 3 * d)?,
                tape.slice_cols(pre, 3 * d, 4 * d)?,
            ];
            (h, c) = self.update(tape, gates, c)?;
            outputs.push(h);
        }
        tape.concat_rows(&outputs)
    }
}

/// Multi-head scaled dot-product attention with conditioned projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    heads: usize,
    q: Projection,
    k: Projection,
    v: Projection,
    o: Projection,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, path: &str, d_model: usize, heads: usize, spec: BlockSpec) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::invalid(format!("{path}: {heads} heads do not divide D_model = {d_model}")));
        }
        let mut proj = |name: &str| {
            Projection::new(store, &format!("{path}.{name}"), d_model, d_model, spec.langs, spec.conditioning, true)
        };
        Ok(Self {
            heads,
            q: proj("W_Q")?,
            k: proj("W_K")?,
            v: proj("W_V")?,
            o: proj("W_O")?,
        })
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seeds: &SeedTree) -> Result<()> {
        self.projections().try_for_each(|p| p.init(store, seeds))
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn projections(&self) -> impl Iterator<Item = &Projection> {
        [&self.q, &self.k, &self.v, &self.o].into_iter()
    }

    /// Queries from `xq`, keys and values from `xkv`, segmented by `plan`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        lang: LanguageId,
        xq: Var,
        xkv: Var,
        plan: &AttentionPlan,
    ) -> Result<Var> {
        let q = self.q.forward(tape, lang, xq)?;
        let k = self.k.forward(tape, lang, xkv)?;
        let v = self.v.forward(tape, lang, xkv)?;
        let a = tape.attention(q, k, v, self.heads, plan)?;
        self.o.forward(tape, lang, a)
    }

    /// Self-attention over a single sequence `x`, optionally causal.
    pub fn self_attention<T: Scalar>(&self, tape: &mut Tape<'_, T>, lang: LanguageId, x: Var, causal: bool) -> Result<Var> {
        let plan = AttentionPlan::self_attention(&[tape.value(x).rows()], causal)?;
        self.forward(tape, lang, x, x, &plan)
    }
}

/// `relu(x W_1 + b_1) W_2 + b_2` with conditioned maps.
#[derive(Clone, Debug)]
pub struct FeedForward {
    w1: Projection,
    w2: Projection,
}

impl FeedForward {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, path: &str, d_model: usize, d_ff: usize, spec: BlockSpec) -> Result<Self> {
        Ok(Self {
            w1: Projection::new(store, &format!("{path}.W_1"), d_model, d_ff, spec.langs, spec.conditioning, true)?,
            w2: Projection::new(store, &format!("{path}.W_2"), d_ff, d_model, spec.langs, spec.conditioning, true)?,
        })
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seeds: &SeedTree) -> Result<()> {
        self.w1.init(store, seeds)?;
        self.w2.init(store, seeds)
    }

    pub fn projections(&self) -> impl Iterator<Item = &Projection> {
        [&self.w1, &self.w2].into_iter()
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, lang: LanguageId, x: Var) -> Result<Var> {
        let hidden = self.w1.forward(tape, lang, x)?;
        let hidden = tape.relu(hidden)?;
        self.w2.forward(tape, lang, hidden)
    }
}

/// Sizes of a [`FactorizedAttentionBlock`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionDims {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
}

/// Pre-norm residual block: `x + SelfAtt(LN(x))`, then optionally
/// `x + CrossAtt(LN(x), memory)`, then `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct FactorizedAttentionBlock {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    cross: Option<(LayerNorm, MultiHeadAttention)>,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

impl FactorizedAttentionBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        path: &str,
        dims: AttentionDims,
        with_cross: bool,
        spec: BlockSpec,
    ) -> Result<Self> {
        let AttentionDims { d_model, heads, d_ff } = dims;
        let ln_attn = LayerNorm::new(store, &format!("{path}.ln_attn"), d_model)?;
        let attn = MultiHeadAttention::new(store, &format!("{path}.attn"), d_model, heads, spec)?;
        let cross = if with_cross {
            Some((
                LayerNorm::new(store, &format!("{path}.ln_cross"), d_model)?,
                MultiHeadAttention::new(store, &format!("{path}.cross"), d_model, heads, spec)?,
            ))
        } else {
            None
        };
        Ok(Self {
            ln_attn,
            attn,
            cross,
            ln_ffn: LayerNorm::new(store, &format!("{path}.ln_ffn"), d_model)?,
            ffn: FeedForward::new(store, &format!("{path}.ffn"), d_model, d_ff, spec)?,
        })
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seeds: &SeedTree) -> Result<()> {
        self.ln_attn.init(store)?;
        self.attn.init(store, seeds)?;
        if let Some((ln, mha)) = &self.cross {
            ln.init(store)?;
            mha.init(store, seeds)?;
        }
        self.ln_ffn.init(store)?;
        self.ffn.init(store, seeds)
    }

    pub fn attention(&self) -> &MultiHeadAttention {
        &self.attn
    }

    pub fn feed_forward(&self) -> &FeedForward {
        &self.ffn
    }

    pub fn projections(&self) -> impl Iterator<Item = &Projection> {
        let cross = self.cross.iter().flat_map(|(_, m)| m.projections());
        self.attn.projections().chain(cross).chain(self.ffn.projections())
    }

    /// `plan` segments the self-attention over packed rows of `x`; `memory`
    /// supplies the keys and the query-to-key plan for cross-attention.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        lang: LanguageId,
        x: Var,
        plan: &AttentionPlan,
        memory: Option<(Var, &AttentionPlan)>,
    ) -> Result<Var> {
        let n = self.ln_attn.forward(tape, x)?;
        let a = self.attn.forward(tape, lang, n, n, plan)?;
        let mut x = tape.add(x, a)?;
        match (&self.cross, memory) {
            (Some((ln, mha)), Some((mem, cross_plan))) => {
                let n = ln.forward(tape, x)?;
                let a = mha.forward(tape, lang, n, mem, cross_plan)?;
                x = tape.add(x, a)?;
            }
            (None, None) => {}
            (Some(_), None) => return Err(Error::invalid("cross-attention block needs encoder memory")),
            (None, Some(_)) => return Err(Error::invalid("block has no cross-attention")),
        }
        let n = self.ln_ffn.forward(tape, x)?;
        let f = self.ffn.forward(tape, lang, n)?;
        tape.add(x, f)
    }
}
