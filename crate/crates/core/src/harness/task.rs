//! Synthetic multilingual transduction tasks.
//!
//! Every language maps a symbol sequence to tokens through its own
//! permutation of the alphabet, optionally reversing the order. Input frames
//! are scaled one-hot vectors with Gaussian noise, mapped to `d_feat`.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::factorlin::LanguageId;
use crate::rng::SeedTree;
use crate::seq2seq::{Utterance, BOS, EOS, FIRST_SYMBOL};

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageRule {
    /// `permutation[a]` is the output symbol for input symbol `a`.
    pub permutation: Vec<usize>,
    pub reverse: bool,
    /// Scale of the one-hot part of every frame.
    pub gain: f64,
}

/// Which languages reverse their output order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReversePolicy {
    None,
    /// Odd-indexed languages.
    Alternate,
    All,
}

impl std::str::FromStr for ReversePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ReversePolicy::None),
            "alternate" => Ok(ReversePolicy::Alternate),
            "all" => Ok(ReversePolicy::All),
            other => Err(Error::invalid(format!("unknown reverse policy {other:?}"))),
        }
    }
}

impl std::fmt::Display for ReversePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ReversePolicy::None => "none",
            ReversePolicy::Alternate => "alternate",
            ReversePolicy::All => "all",
        })
    }
}

/// Knobs from which [`TaskSpec::sample`] draws a concrete task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskOptions {
    pub langs: usize,
    pub symbols: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub noise: f64,
    pub d_feat: usize,
    /// Utterances per language in each split.
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    /// Gains are spread evenly over `[gain_min, gain_max]` by language index.
    pub gain_min: f64,
    pub gain_max: f64,
    pub reverse: ReversePolicy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub symbols: usize,
    pub rules: Vec<LanguageRule>,
    pub min_len: usize,
    pub max_len: usize,
    pub noise: f64,
    pub d_feat: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl TaskSpec {
    /// Draws permutations that pairwise disagree on at least one symbol.
    pub fn sample(options: &TaskOptions, seed: u64) -> Result<Self> {
        let TaskOptions { langs, symbols, .. } = *options;
        if symbols < 2 || langs < 1 {
            return Err(Error::invalid(format!("task needs V >= 2 and L >= 1, got V = {symbols}, L = {langs}")));
        }
        if (2..=symbols).try_fold(1usize, |acc, n| acc.checked_mul(n)).is_some_and(|total| total < langs) {
            return Err(Error::invalid(format!("{langs} languages cannot have distinct permutations of {symbols} symbols")));
        }
        let seeds = SeedTree::new(seed).child("task");
        let mut rules: Vec<LanguageRule> = Vec::with_capacity(langs);
        for l in 0..langs {
            let mut rng = seeds.stream(&format!("permutation.{l}"));
            let permutation = loop {
                let mut p: Vec<usize> = (0..symbols).collect();
                p.shuffle(&mut rng);
                if rules.iter().all(|r| r.permutation != p) {
                    break p;
                }
            };
            let reverse = match options.reverse {
                ReversePolicy::None => false,
                ReversePolicy::Alternate => l % 2 == 1,
                ReversePolicy::All => true,
            };
            let gain = if langs == 1 {
                options.gain_min
            } else {
                options.gain_min + (options.gain_max - options.gain_min) * l as f64 / (langs - 1) as f64
            };
            rules.push(LanguageRule {
                permutation,
                reverse,
                gain,
            });
        }
        let spec = Self {
            symbols,
            rules,
            min_len: options.min_len,
            max_len: options.max_len,
            noise: options.noise,
            d_feat: options.d_feat,
            train_size: options.train_size,
            dev_size: options.dev_size,
            test_size: options.test_size,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn langs(&self) -> usize {
        self.rules.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.symbols < 2 || self.rules.is_empty() {
            return Err(Error::invalid(format!(
                "task needs V >= 2 and L >= 1, got V = {}, L = {}",
                self.symbols,
                self.rules.len()
            )));
        }
        for (l, rule) in self.rules.iter().enumerate() {
            let mut seen = vec![false; self.symbols];
            if rule.permutation.len() != self.symbols
                || !rule.permutation.iter().all(|&a| a < self.symbols && !std::mem::replace(&mut seen[a], true))
            {
                return Err(Error::invalid(format!("language {l}: permutation is not a bijection on {} symbols", self.symbols)));
            }
            if !(rule.gain > 0.0 && rule.gain.is_finite()) {
                return Err(Error::invalid(format!("language {l}: gain must be positive")));
            }
        }
        for a in 0..self.rules.len() {
            for b in a + 1..self.rules.len() {
                if self.rules[a].permutation == self.rules[b].permutation {
                    return Err(Error::invalid(format!("languages {a} and {b} share a permutation")));
                }
            }
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::invalid(format!("invalid length range [{}, {}]", self.min_len, self.max_len)));
        }
        if self.d_feat == 0 || !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("d_feat must be positive and noise non-negative"));
        }
        Ok(())
    }

    fn size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_size,
            Split::Dev => self.dev_size,
            Split::Test => self.test_size,
        }
    }

    /// Output symbols for an input symbol sequence in language `l`.
    pub fn transduce(&self, l: usize, input: &[usize]) -> Vec<usize> {
        let rule = &self.rules[l];
        let mut out: Vec<usize> = input.iter().map(|&a| rule.permutation[a]).collect();
        if rule.reverse {
            out.reverse();
        }
        out
    }

    /// Identity when `d_feat == V`, otherwise a fixed `N(0, 1/V)` matrix.
    fn feature_map(&self) -> Option<Vec<f64>> {
        if self.d_feat == self.symbols {
            return None;
        }
        let mut rng = SeedTree::new(self.seed).child("task").stream("feature_map");
        let normal = Normal::new(0.0, 1.0 / (self.symbols as f64).sqrt()).expect("valid normal");
        Some((0..self.symbols * self.d_feat).map(|_| normal.sample(&mut rng)).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultilingualCorpus {
    pub spec: TaskSpec,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl MultilingualCorpus {
    pub fn split(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// Writes `<split>.csv` for every split plus `task.txt` describing the
    /// rules, returning the paths in that order.
    ///
    /// CSV columns are `lang,tokens,frames`: tokens are space separated and
    /// frame rows are `;`-separated lists of space-separated reals printed
    /// in shortest round-trip form.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut paths = Vec::with_capacity(4);
        for split in Split::ALL {
            let path = dir.join(format!("{}.csv", split.name()));
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["lang", "tokens", "frames"])?;
            for u in self.split(split) {
                let tokens: Vec<String> = u.tokens.iter().map(usize::to_string).collect();
                let rows: Vec<String> = (0..u.frames.rows())
                    .map(|t| u.frames.row(t).iter().map(f64::to_string).collect::<Vec<_>>().join(" "))
                    .collect();
                w.write_record([u.language.index().to_string(), tokens.join(" "), rows.join(";")])?;
            }
            w.flush()?;
            paths.push(path);
        }
        let mut text = format!(
            "symbols = {}\nlengths = {}..={}\nnoise = {}\nd_feat = {}\nseed = {}\n",
            self.spec.symbols, self.spec.min_len, self.spec.max_len, self.spec.noise, self.spec.d_feat, self.spec.seed
        );
        for (l, rule) in self.spec.rules.iter().enumerate() {
            let perm: Vec<String> = rule.permutation.iter().map(usize::to_string).collect();
            text.push_str(&format!(
                "lang {l}: gain = {}, reverse = {}, permutation = {}\n",
                rule.gain,
                rule.reverse,
                perm.join(" ")
            ));
        }
        let path = dir.join("task.txt");
        std::fs::write(&path, text)?;
        paths.push(path);
        Ok(paths)
    }
}

/// Generates every split, language by language; fully determined by the seed.
pub fn generate_corpus(spec: &TaskSpec) -> Result<MultilingualCorpus> {
    spec.validate()?;
    let map = spec.feature_map();
    let seeds = SeedTree::new(spec.seed).child("corpus");
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid normal");
    let mut splits = Vec::with_capacity(3);
    for split in Split::ALL {
        let mut utts = Vec::with_capacity(spec.size(split) * spec.langs());
        for (l, rule) in spec.rules.iter().enumerate() {
            let mut rng = seeds.stream(&format!("{}.{l}", split.name()));
            for _ in 0..spec.size(split) {
                let n = rng.random_range(spec.min_len..=spec.max_len);
                let input: Vec<usize> = (0..n).map(|_| rng.random_range(0..spec.symbols)).collect();
                let mut raw = vec![0.0; n * spec.symbols];
                for (t, &a) in input.iter().enumerate() {
                    let row = &mut raw[t * spec.symbols..(t + 1) * spec.symbols];
                    for v in row.iter_mut() {
                        *v = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    }
                    row[a] += rule.gain;
                }
                let frames = match &map {
                    None => raw,
                    Some(m) => crate::diffcore::kernels::matmul(&raw, m, n, spec.symbols, spec.d_feat),
                };
                let mut tokens = Vec::with_capacity(n + 2);
                tokens.push(BOS);
                tokens.extend(spec.transduce(l, &input).into_iter().map(|s| s + FIRST_SYMBOL));
                tokens.push(EOS);
                utts.push(Utterance::new(Tensor::new(vec![n, spec.d_feat], frames)?, tokens, LanguageId::new(l))?);
            }
        }
        splits.push(utts);
    }
    let test = splits.pop().expect("three splits");
    let dev = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(MultilingualCorpus {
        spec: spec.clone(),
        train,
        dev,
        test,
    })
}
