//! Segmented multi-head scaled dot-product attention kernel.
//!
//! Rows of a batch are packed utterance after utterance; a plan lists, for
//! every utterance, which query rows attend to which key rows. Heads are
//! contiguous column blocks of width `d / heads`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::kernels::{dot, softmax_in_place};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionPlan {
    segments: Vec<Segment>,
    causal: bool,
    q_rows: usize,
    k_rows: usize,
}

impl AttentionPlan {
    /// Each packed sequence attends to itself; `causal` hides later positions.
    pub fn self_attention(lens: &[usize], causal: bool) -> Result<Self> {
        Self::cross_with(lens, lens, causal)
    }

    /// Query sequence `i` attends to key sequence `i`.
    pub fn cross(q_lens: &[usize], k_lens: &[usize]) -> Result<Self> {
        Self::cross_with(q_lens, k_lens, false)
    }

    fn cross_with(q_lens: &[usize], k_lens: &[usize], causal: bool) -> Result<Self> {
        if q_lens.is_empty() || q_lens.len() != k_lens.len() {
            return Err(Error::shape("attention_plan", q_lens, k_lens));
        }
        if q_lens.iter().chain(k_lens).any(|&l| l == 0) {
            return Err(Error::invalid("attention over an empty sequence"));
        }
        let mut segments = Vec::with_capacity(q_lens.len());
        let (mut qs, mut ks) = (0, 0);
        for (&ql, &kl) in q_lens.iter().zip(k_lens) {
            segments.push(Segment {
                q_start: qs,
                q_len: ql,
                k_start: ks,
                k_len: kl,
            });
            qs += ql;
            ks += kl;
        }
        Ok(Self {
            segments,
            causal,
            q_rows: qs,
            k_rows: ks,
        })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn causal(&self) -> bool {
        self.causal
    }

    pub fn q_rows(&self) -> usize {
        self.q_rows
    }

    pub fn k_rows(&self) -> usize {
        self.k_rows
    }

    fn visible(&self, seg: &Segment, qi: usize) -> usize {
        if self.causal {
            (qi + 1).min(seg.k_len)
        } else {
            seg.k_len
        }
    }

    fn probs_len(&self, heads: usize) -> usize {
        self.segments.iter().map(|s| s.q_len * s.k_len).sum::<usize>() * heads
    }
}

pub(crate) struct AttentionOutput<T> {
    pub out: Vec<T>,
    pub probs: Vec<T>,
}

/// Returns the concatenated head outputs `[q_rows × d]` and the attention
/// probabilities, laid out per segment, per head, row-major `q_len × k_len`.
pub(crate) fn forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    d: usize,
    heads: usize,
    plan: &AttentionPlan,
) -> AttentionOutput<T> {
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut out = vec![T::zero(); plan.q_rows * d];
    let mut probs = vec![T::zero(); plan.probs_len(heads)];
    let mut offset = 0;
    for seg in &plan.segments {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for qi in 0..seg.q_len {
                let qrow = (seg.q_start + qi) * d;
                let q_h = &q[qrow + cols.start..qrow + cols.end];
                let visible = plan.visible(seg, qi);
                let p_row = &mut probs[offset + qi * seg.k_len..offset + qi * seg.k_len + visible];
                for (kj, p) in p_row.iter_mut().enumerate() {
                    let krow = (seg.k_start + kj) * d;
                    *p = dot(q_h, &k[krow + cols.start..krow + cols.end]) * scale;
                }
                softmax_in_place(p_row);
                let o = &mut out[qrow + cols.start..qrow + cols.end];
                for (kj, &p) in p_row.iter().enumerate() {
                    let vrow = (seg.k_start + kj) * d;
                    for (ov, &vv) in o.iter_mut().zip(&v[vrow + cols.start..vrow + cols.end]) {
                        *ov += p * vv;
                    }
                }
            }
            offset += seg.q_len * seg.k_len;
        }
    }
    AttentionOutput { out, probs }
}

pub(crate) struct AttentionGrads<T> {
    pub dq: Vec<T>,
    pub dk: Vec<T>,
    pub dv: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    grad: &[T],
    d: usize,
    heads: usize,
    plan: &AttentionPlan,
) -> AttentionGrads<T> {
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut offset = 0;
    let mut dp = Vec::new();
    for seg in &plan.segments {
        for h in 0..heads {
            let c0 = h * dh;
            for qi in 0..seg.q_len {
                let qrow = (seg.q_start + qi) * d + c0;
                let visible = plan.visible(seg, qi);
                let p_row = &probs[offset + qi * seg.k_len..offset + qi * seg.k_len + visible];
                let g_row = &grad[qrow..qrow + dh];
                // dP = dO · Vᵀ and dV += Pᵀ · dO
                dp.clear();
                for (kj, &p) in p_row.iter().enumerate() {
                    let vrow = (seg.k_start + kj) * d + c0;
                    dp.push(dot(g_row, &v[vrow..vrow + dh]));
                    for (dvv, &g) in dv[vrow..vrow + dh].iter_mut().zip(g_row) {
                        *dvv += p * g;
                    }
                }
                // softmax backward: dS = P ⊙ (dP − Σ P·dP)
                let inner: T = p_row.iter().zip(&dp).map(|(&p, &g)| p * g).sum();
                for (kj, &p) in p_row.iter().enumerate() {
                    let ds = p * (dp[kj] - inner) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let krow = (seg.k_start + kj) * d + c0;
                    for c in 0..dh {
                        dq[qrow + c] += ds * k[krow + c];
                        dk[krow + c] += ds * q[qrow + c];
                    }
                }
            }
            offset += seg.q_len * seg.k_len;
        }
    }
    AttentionGrads { dq, dk, dv }
}
