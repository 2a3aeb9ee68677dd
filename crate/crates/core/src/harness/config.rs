//! `key = value` training configuration.

use std::path::Path;
use std::str::FromStr;

use super::task::{ReversePolicy, TaskOptions};
use crate::error::{Error, Result};
use crate::factorlin::Conditioning;
use crate::seq2seq::{Architecture, ModelConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub architecture: Architecture,
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Factor rank; 0 selects the fully shared baseline.
    pub k: usize,
    pub positional: bool,
    pub zero_output: bool,
    pub lr_base: f64,
    pub warmup: u64,
    pub max_frames: usize,
    pub updates: u64,
    /// Batches whose gradients are summed into one update.
    pub accumulate: usize,
    pub eval_every: u64,
    pub seed: u64,
    pub langs: usize,
    pub symbols: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub noise: f64,
    pub d_feat: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub gain_min: f64,
    pub gain_max: f64,
    pub reverse: ReversePolicy,
    pub out_dir: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Attention,
            d_model: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            d_ff: 128,
            k: 1,
            positional: true,
            zero_output: true,
            lr_base: 1.5,
            warmup: 400,
            max_frames: 512,
            updates: 3000,
            accumulate: 1,
            eval_every: 250,
            seed: 0,
            langs: 4,
            symbols: 12,
            min_len: 3,
            max_len: 8,
            noise: 0.1,
            d_feat: 12,
            train_size: 1000,
            dev_size: 100,
            test_size: 100,
            gain_min: 1.0,
            gain_max: 1.0,
            reverse: ReversePolicy::None,
            out_dir: "run".into(),
        }
    }
}

/// Every recognized key, in canonical echo order.
pub const KEYS: &[&str] = &[
    "arch",
    "d_model",
    "encoder_layers",
    "decoder_layers",
    "heads",
    "d_ff",
    "k",
    "positional",
    "zero_output",
    "lr_base",
    "warmup",
    "max_frames",
    "updates",
    "accumulate",
    "eval_every",
    "seed",
    "langs",
    "symbols",
    "min_len",
    "max_len",
    "noise",
    "d_feat",
    "train_size",
    "dev_size",
    "test_size",
    "gain_min",
    "gain_max",
    "reverse",
    "out_dir",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("cannot parse {key} = {value:?}")))
}

impl TrainConfig {
    /// Parses config text on top of the defaults. Unknown keys, duplicate
    /// keys and malformed lines are rejected with their line number.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                message: format!("expected `key = value`, got {content:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) && KEYS.contains(&key) {
                return Err(Error::Config {
                    line,
                    message: format!("duplicate key {key}"),
                });
            }
            config.set(key, value).map_err(|e| Error::Config {
                line,
                message: match e {
                    Error::InvalidArgument(m) => m,
                    other => other.to_string(),
                },
            })?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "arch" => self.architecture = value.parse()?,
            "d_model" => self.d_model = parse(key, value)?,
            "encoder_layers" => self.encoder_layers = parse(key, value)?,
            "decoder_layers" => self.decoder_layers = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "d_ff" => self.d_ff = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "positional" => self.positional = parse(key, value)?,
            "zero_output" => self.zero_output = parse(key, value)?,
            "lr_base" => self.lr_base = parse(key, value)?,
            "warmup" => self.warmup = parse(key, value)?,
            "max_frames" => self.max_frames = parse(key, value)?,
            "updates" => self.updates = parse(key, value)?,
            "accumulate" => self.accumulate = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "langs" => self.langs = parse(key, value)?,
            "symbols" => self.symbols = parse(key, value)?,
            "min_len" => self.min_len = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "noise" => self.noise = parse(key, value)?,
            "d_feat" => self.d_feat = parse(key, value)?,
            "train_size" => self.train_size = parse(key, value)?,
            "dev_size" => self.dev_size = parse(key, value)?,
            "test_size" => self.test_size = parse(key, value)?,
            "gain_min" => self.gain_min = parse(key, value)?,
            "gain_max" => self.gain_max = parse(key, value)?,
            "reverse" => self.reverse = value.parse()?,
            "out_dir" => self.out_dir = value.to_string(),
            other => return Err(Error::invalid(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model as u64),
            ("encoder_layers", self.encoder_layers as u64),
            ("decoder_layers", self.decoder_layers as u64),
            ("heads", self.heads as u64),
            ("d_ff", self.d_ff as u64),
            ("warmup", self.warmup),
            ("max_frames", self.max_frames as u64),
            ("accumulate", self.accumulate as u64),
            ("eval_every", self.eval_every),
            ("langs", self.langs as u64),
            ("symbols", self.symbols as u64),
            ("min_len", self.min_len as u64),
            ("max_len", self.max_len as u64),
            ("d_feat", self.d_feat as u64),
            ("train_size", self.train_size as u64),
            ("dev_size", self.dev_size as u64),
        ];
        if let Some((key, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{key} must be positive")));
        }
        if !(self.lr_base > 0.0 && self.lr_base.is_finite()) {
            return Err(Error::invalid("lr_base must be positive"));
        }
        if !(self.gain_min > 0.0 && self.gain_max >= self.gain_min && self.gain_max.is_finite()) {
            return Err(Error::invalid("gains need 0 < gain_min <= gain_max"));
        }
        if self.max_len > self.max_frames {
            return Err(Error::invalid(format!(
                "max_len = {} exceeds max_frames = {}",
                self.max_len, self.max_frames
            )));
        }
        self.model_config().validate()
    }

    pub fn conditioning(&self) -> Conditioning {
        match self.k {
            0 => Conditioning::Shared,
            rank => Conditioning::Factorized { rank },
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            architecture: self.architecture,
            d_feat: self.d_feat,
            d_model: self.d_model,
            symbols: self.symbols,
            langs: self.langs,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            heads: self.heads,
            d_ff: self.d_ff,
            conditioning: self.conditioning(),
            positional: self.positional,
            zero_output: self.zero_output,
        }
    }

    pub fn task_options(&self) -> TaskOptions {
        TaskOptions {
            langs: self.langs,
            symbols: self.symbols,
            min_len: self.min_len,
            max_len: self.max_len,
            noise: self.noise,
            d_feat: self.d_feat,
            train_size: self.train_size,
            dev_size: self.dev_size,
            test_size: self.test_size,
            gain_min: self.gain_min,
            gain_max: self.gain_max,
            reverse: self.reverse,
        }
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let values = [
            self.architecture.to_string(),
            self.d_model.to_string(),
            self.encoder_layers.to_string(),
            self.decoder_layers.to_string(),
            self.heads.to_string(),
            self.d_ff.to_string(),
            self.k.to_string(),
            self.positional.to_string(),
            self.zero_output.to_string(),
            self.lr_base.to_string(),
            self.warmup.to_string(),
            self.max_frames.to_string(),
            self.updates.to_string(),
            self.accumulate.to_string(),
            self.eval_every.to_string(),
            self.seed.to_string(),
            self.langs.to_string(),
            self.symbols.to_string(),
            self.min_len.to_string(),
            self.max_len.to_string(),
            self.noise.to_string(),
            self.d_feat.to_string(),
            self.train_size.to_string(),
            self.dev_size.to_string(),
            self.test_size.to_string(),
            self.gain_min.to_string(),
            self.gain_max.to_string(),
            self.reverse.to_string(),
            self.out_dir.clone(),
        ];
        KEYS.iter().zip(values).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
