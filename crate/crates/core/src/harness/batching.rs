use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::factorlin::LanguageId;
use crate::rng::SeedTree;
use crate::seq2seq::Utterance;

/// Indices of utterances that share one language.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub language: LanguageId,
    pub indices: Vec<usize>,
}

/// One epoch of monolingual batches holding at most `max_frames` input frames
/// each. Utterances are shuffled within their language, packed greedily,
/// and the per-language batch lists are interleaved round-robin.
pub fn make_batches(utterances: &[Utterance], max_frames: usize, seed: u64) -> Result<Vec<Batch>> {
    if let Some((i, u)) = utterances.iter().enumerate().find(|(_, u)| u.frames.rows() > max_frames) {
        return Err(Error::invalid(format!(
            "utterance {i} has {} frames, more than max_frames = {max_frames}",
            u.frames.rows()
        )));
    }
    let langs = utterances.iter().map(|u| u.language.index() + 1).max().unwrap_or(0);
    let seeds = SeedTree::new(seed).child("batches");
    let mut per_lang: Vec<Vec<Batch>> = Vec::with_capacity(langs);
    for l in 0..langs {
        let mut idx: Vec<usize> = (0..utterances.len()).filter(|&i| utterances[i].language.index() == l).collect();
        idx.shuffle(&mut seeds.stream(&format!("shuffle.{l}")));
        let mut batches = Vec::new();
        let mut current = Vec::new();
        let mut frames = 0;
        for i in idx {
            let n = utterances[i].frames.rows();
            if frames + n > max_frames && !current.is_empty() {
                batches.push(std::mem::take(&mut current));
                frames = 0;
            }
            current.push(i);
            frames += n;
        }
        if !current.is_empty() {
            batches.push(current);
        }
        per_lang.push(
            batches
                .into_iter()
                .map(|indices| Batch {
                    language: LanguageId::new(l),
                    indices,
                })
                .collect(),
        );
    }
    let rounds = per_lang.iter().map(Vec::len).max().unwrap_or(0);
    let mut iters: Vec<_> = per_lang.into_iter().map(Vec::into_iter).collect();
    let mut out = Vec::new();
    for _ in 0..rounds {
        out.extend(iters.iter_mut().filter_map(Iterator::next));
    }
    Ok(out)
}
