use std::path::Path;

use serde::{Deserialize, Serialize};

use super::batching::{make_batches, Batch};
use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::optim::{Adam, AdamConfig};
use super::schedule::noam_lr;
use super::task::MultilingualCorpus;
use crate::diffcore::{ParamStore, Tape};
use crate::error::{Error, Result};
use crate::rng::SeedTree;
use crate::scalar::Scalar;
use crate::seq2seq::{EncoderDecoderModel, Utterance, EOS};

/// Environment variable capping evaluation worker threads.
pub const THREADS_ENV: &str = "FACTORWEIGHTS_THREADS";

/// Worker count from `FACTORWEIGHTS_THREADS`, defaulting to the machine's
/// available parallelism.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// One line of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub lang: usize,
    pub split: String,
    pub loss: f64,
    pub token_acc: f64,
    pub seq_err: f64,
    pub lr: f64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_metrics(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    std::fs::write(path, metrics_csv(rows)?)?;
    Ok(())
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Evaluation summary for one language.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LanguageMetrics {
    pub lang: usize,
    pub utterances: usize,
    /// Teacher-forced mean token cross-entropy, EOS included.
    pub loss: f64,
    pub token_accuracy: f64,
    pub sequence_error: f64,
}

/// Running tally of greedy-decoding quality.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Score {
    pub matches: usize,
    pub reference_tokens: usize,
    pub exact: usize,
    pub utterances: usize,
}

impl Score {
    /// Adds one hypothesis. Positions beyond the shorter sequence count as
    /// misses against the reference length.
    pub fn add(&mut self, hypothesis: &[usize], reference: &[usize]) {
        self.matches += hypothesis.iter().zip(reference).filter(|(a, b)| a == b).count();
        self.reference_tokens += reference.len();
        self.exact += usize::from(hypothesis == reference);
        self.utterances += 1;
    }

    pub fn token_accuracy(&self) -> f64 {
        self.matches as f64 / self.reference_tokens.max(1) as f64
    }

    pub fn sequence_error(&self) -> f64 {
        1.0 - self.exact as f64 / self.utterances.max(1) as f64
    }
}

/// Symbols of a greedy output, dropping EOS and anything after it.
pub fn hypothesis_symbols(decoded: &[usize]) -> &[usize] {
    let end = decoded.iter().position(|&t| t == EOS).unwrap_or(decoded.len());
    &decoded[..end]
}

const EVAL_CHUNK: usize = 32;

struct ChunkResult {
    loss_sum: f64,
    targets: usize,
    score: Score,
}

/// Greedy-decodes and scores every utterance, per language in ascending
/// order, on [`worker_threads`] threads.
pub fn evaluate<T: Scalar>(
    store: &ParamStore<T>,
    model: &EncoderDecoderModel,
    utterances: &[Utterance],
) -> Result<Vec<LanguageMetrics>> {
    evaluate_with_threads(store, model, utterances, worker_threads())
}

/// [`evaluate`] with an explicit thread count. Chunks are merged in
/// utterance order, so the numbers do not depend on `threads`.
pub fn evaluate_with_threads<T: Scalar>(
    store: &ParamStore<T>,
    model: &EncoderDecoderModel,
    utterances: &[Utterance],
    threads: usize,
) -> Result<Vec<LanguageMetrics>> {
    let langs = model.config().langs;
    if let Some(u) = utterances.iter().find(|u| u.language.index() >= langs) {
        return Err(Error::LanguageOutOfRange {
            lang: u.language.index(),
            langs,
        });
    }
    let mut present: Vec<usize> = utterances.iter().map(|u| u.language.index()).collect();
    present.sort_unstable();
    present.dedup();
    let mut jobs: Vec<(usize, Vec<&Utterance>)> = Vec::new();
    for &l in &present {
        let members: Vec<&Utterance> = utterances.iter().filter(|u| u.language.index() == l).collect();
        jobs.extend(members.chunks(EVAL_CHUNK).map(|c| (l, c.to_vec())));
    }
    let run = |chunk: &[&Utterance]| -> Result<ChunkResult> {
        let mut tape = Tape::inference(store);
        let loss = model.batch_loss(&mut tape, chunk)?;
        let targets: usize = chunk.iter().map(|u| u.tokens.len() - 1).sum();
        let loss_sum = tape.scalar(loss).as_f64() * targets as f64;
        let frames: Vec<_> = chunk.iter().map(|u| &u.frames).collect();
        let max_lens: Vec<usize> = chunk.iter().map(|u| u.symbols().len() + 1).collect();
        let decoded = model.greedy_decode_batch(store, chunk[0].language, &frames, &max_lens)?;
        let mut score = Score::default();
        for (u, d) in chunk.iter().zip(&decoded) {
            score.add(hypothesis_symbols(d), u.symbols());
        }
        Ok(ChunkResult {
            loss_sum,
            targets,
            score,
        })
    };
    let threads = threads.min(jobs.len()).max(1);
    let results: Vec<Result<ChunkResult>> = if threads == 1 {
        jobs.iter().map(|(_, c)| run(c)).collect()
    } else {
        let mut slots: Vec<Option<Result<ChunkResult>>> = (0..jobs.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|w| {
                    let jobs = &jobs;
                    let run = &run;
                    scope.spawn(move || {
                        (w..jobs.len())
                            .step_by(threads)
                            .map(|j| (j, run(&jobs[j].1)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (j, r) in h.join().expect("evaluation worker panicked") {
                    slots[j] = Some(r);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("every job ran")).collect()
    };
    let mut out = Vec::with_capacity(present.len());
    let mut results = results.into_iter();
    for &l in &present {
        let (mut loss_sum, mut targets, mut score) = (0.0, 0, Score::default());
        for _ in jobs.iter().filter(|(jl, _)| *jl == l) {
            let r = results.next().expect("one result per job")?;
            loss_sum += r.loss_sum;
            targets += r.targets;
            score.matches += r.score.matches;
            score.reference_tokens += r.score.reference_tokens;
            score.exact += r.score.exact;
            score.utterances += r.score.utterances;
        }
        out.push(LanguageMetrics {
            lang: l,
            utterances: score.utterances,
            loss: loss_sum / targets.max(1) as f64,
            token_accuracy: score.token_accuracy(),
            sequence_error: score.sequence_error(),
        });
    }
    Ok(out)
}

/// Rebuilds the model described by a checkpoint's config echo and loads its
/// parameters.
pub fn restore_model(checkpoint: &Checkpoint<f64>) -> Result<(TrainConfig, ParamStore<f64>, EncoderDecoderModel)> {
    let config = TrainConfig::parse(&checkpoint.config)?;
    let mut store = ParamStore::new();
    let model = EncoderDecoderModel::new(&mut store, config.model_config())?;
    checkpoint.restore(&mut store)?;
    Ok((config, store, model))
}

/// Evaluates a saved model on a corpus split.
pub fn evaluate_checkpoint(checkpoint: &Checkpoint<f64>, utterances: &[Utterance]) -> Result<Vec<LanguageMetrics>> {
    let (_, store, model) = restore_model(checkpoint)?;
    if let Some(u) = utterances.iter().find(|u| u.frames.cols() != model.config().d_feat) {
        return Err(Error::invalid(format!(
            "corpus frames have width {}, model expects d_feat = {}",
            u.frames.cols(),
            model.config().d_feat
        )));
    }
    evaluate(&store, &model, utterances)
}

pub struct TrainOutcome {
    pub config: TrainConfig,
    pub model: EncoderDecoderModel,
    /// Parameters after the last update.
    pub store: ParamStore<f64>,
    pub metrics: Vec<MetricsRow>,
    pub final_checkpoint: Checkpoint<f64>,
    /// Highest mean dev token accuracy, ties broken by lower mean dev loss.
    pub best_checkpoint: Checkpoint<f64>,
    pub best_step: u64,
    pub clipped_updates: u64,
}

impl TrainOutcome {
    /// Writes `metrics.csv`, `final.fwf`, `best.fwf` and `config.cfg`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        write_metrics(dir.join("metrics.csv"), &self.metrics)?;
        self.final_checkpoint.save(dir.join("final.fwf"))?;
        self.best_checkpoint.save(dir.join("best.fwf"))?;
        std::fs::write(dir.join("config.cfg"), self.config.to_text())?;
        Ok(())
    }

    /// Last evaluation row of every language.
    pub fn final_rows(&self) -> Vec<&MetricsRow> {
        let last = self.metrics.last().map_or(0, |r| r.step);
        self.metrics.iter().filter(|r| r.step == last).collect()
    }
}

/// Cycles through epochs of batches, reshuffled per epoch.
struct BatchStream<'a> {
    utterances: &'a [Utterance],
    max_frames: usize,
    seeds: SeedTree,
    epoch: u64,
    queue: std::vec::IntoIter<Batch>,
}

impl<'a> BatchStream<'a> {
    fn next(&mut self) -> Result<Batch> {
        loop {
            if let Some(b) = self.queue.next() {
                return Ok(b);
            }
            let seed = self.seeds.child(&format!("epoch.{}", self.epoch)).seed();
            self.epoch += 1;
            self.queue = make_batches(self.utterances, self.max_frames, seed)?.into_iter();
        }
    }
}

fn eval_rows(
    store: &ParamStore<f64>,
    model: &EncoderDecoderModel,
    dev: &[Utterance],
    step: u64,
    lr: f64,
) -> Result<Vec<MetricsRow>> {
    Ok(evaluate(store, model, dev)?
        .into_iter()
        .map(|m| MetricsRow {
            step,
            lang: m.lang,
            split: "dev".into(),
            loss: m.loss,
            token_acc: m.token_accuracy,
            seq_err: m.sequence_error,
            lr,
        })
        .collect())
}

fn mean(rows: &[MetricsRow], f: impl Fn(&MetricsRow) -> f64) -> f64 {
    rows.iter().map(f).sum::<f64>() / rows.len().max(1) as f64
}

/// Trains from the config's seed on the corpus train split, evaluating on
/// dev at step 0, every `eval_every` updates and after the last update.
pub fn train(config: &TrainConfig, corpus: &MultilingualCorpus) -> Result<TrainOutcome> {
    config.validate()?;
    let spec = &corpus.spec;
    if spec.langs() != config.langs || spec.symbols != config.symbols || spec.d_feat != config.d_feat {
        return Err(Error::invalid(format!(
            "corpus (L = {}, V = {}, d_feat = {}) does not match the config (L = {}, V = {}, d_feat = {})",
            spec.langs(),
            spec.symbols,
            spec.d_feat,
            config.langs,
            config.symbols,
            config.d_feat
        )));
    }
    if corpus.train.is_empty() || corpus.dev.is_empty() {
        return Err(Error::invalid("train and dev splits must be non-empty"));
    }
    let seeds = SeedTree::new(config.seed);
    let echo = config.to_text();
    let (mut store, model) = EncoderDecoderModel::build::<f64>(config.model_config(), seeds.child("model").seed())?;
    let mut adam = Adam::new(&store, AdamConfig::default());
    let mut batches = BatchStream {
        utterances: &corpus.train,
        max_frames: config.max_frames,
        seeds: seeds.child("batches"),
        epoch: 0,
        queue: Vec::new().into_iter(),
    };

    let mut metrics = eval_rows(&store, &model, &corpus.dev, 0, 0.0)?;
    let mut best_key = (mean(&metrics, |r| r.token_acc), -mean(&metrics, |r| r.loss));
    let mut best_checkpoint = Checkpoint::capture(&store, Some(&adam), 0, &echo);
    let mut best_step = 0;
    let mut clipped_updates = 0;
    let scale = 1.0 / config.accumulate as f64;

    for step in 1..=config.updates {
        store.zero_grads();
        let mut last_lang = 0;
        for _ in 0..config.accumulate {
            let batch = batches.next()?;
            last_lang = batch.language.index();
            let utts: Vec<&Utterance> = batch.indices.iter().map(|&i| &corpus.train[i]).collect();
            let non_finite = || Error::NonFiniteLoss {
                step: step as usize,
                lang: batch.language.index(),
            };
            let tape = &mut Tape::with_params(&store);
            let loss = model.batch_loss(tape, &utts).map_err(|e| match e {
                Error::NonFinite { .. } => non_finite(),
                other => other,
            })?;
            if !tape.scalar(loss).is_finite() {
                return Err(non_finite());
            }
            let grads = tape.backward(loss).map_err(|e| match e {
                Error::NonFinite { .. } => non_finite(),
                other => other,
            })?;
            store.accumulate(&grads);
        }
        let lr = noam_lr(step, config.lr_base, config.warmup, config.d_model)?;
        let report = adam.step(&mut store, lr, scale).map_err(|e| match e {
            Error::NonFinite { .. } => Error::NonFiniteLoss {
                step: step as usize,
                lang: last_lang,
            },
            other => other,
        })?;
        clipped_updates += u64::from(report.clipped);

        if step % config.eval_every == 0 || step == config.updates {
            let rows = eval_rows(&store, &model, &corpus.dev, step, lr)?;
            let key = (mean(&rows, |r| r.token_acc), -mean(&rows, |r| r.loss));
            log::info!(
                "step {step}: dev loss {:.4}, token accuracy {:.4}, lr {lr:.3e}",
                -key.1,
                key.0
            );
            if key > best_key {
                best_key = key;
                best_step = step;
                best_checkpoint = Checkpoint::capture(&store, Some(&adam), step, &echo);
            }
            metrics.extend(rows);
        }
    }
    let final_checkpoint = Checkpoint::capture(&store, Some(&adam), config.updates, &echo);
    Ok(TrainOutcome {
        config: config.clone(),
        model,
        store,
        metrics,
        final_checkpoint,
        best_checkpoint,
        best_step,
        clipped_updates,
    })
}
