use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use factorweights::factorlin::Projection;
use factorweights::harness::{
    evaluate_checkpoint, generate_corpus, read_metrics, train, Checkpoint, MultilingualCorpus, TaskSpec, TrainConfig,
};
use factorweights::seq2seq::{Architecture, EncoderDecoderModel};
use factorweights::verify::{equivalence_sweep, gradcheck_suite, SuiteDims, SweepShape, EQUIV_TOLERANCE};
use factorweights::ParamStore;

#[derive(Parser, Debug)]
#[command(
    name = "factorweights",
    version,
    about = "Language-factorized encoder-decoder models: data, training, evaluation and verification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic multilingual corpus
    GenData(GenData),
    /// Train a model and write checkpoints and metrics
    Train(Train),
    /// Greedy-decode the test split with a checkpoint
    Eval(Eval),
    /// Finite-difference gradient checks of every component
    Gradcheck(Gradcheck),
    /// Fast versus explicit forward equivalence over a seeded sweep
    EquivCheck(EquivCheck),
    /// Parameter accounting for a config
    Params(Params),
    /// Gnuplot data and script from a training run's metrics
    Plot(Plot),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Gradcheck(_) => "gradcheck",
            Command::EquivCheck(_) => "equiv-check",
            Command::Params(_) => "params",
            Command::Plot(_) => "plot",
        }
    }
}

#[derive(Args, Debug)]
pub struct GenData {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct Train {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the config's out_dir
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    arch: Option<Architecture>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    langs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args, Debug)]
pub struct Gradcheck {
    /// Check only this architecture's sequence loss (default: both)
    #[arg(long)]
    arch: Option<Architecture>,
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, default_value_t = 3)]
    langs: usize,
    /// Single seed (default: seeds 0, 1 and 2)
    #[arg(long)]
    seed: Option<u64>,
    /// Width of the standalone factorized linear map
    #[arg(long, value_parser = parse_dims)]
    dims: Option<(usize, usize)>,
}

#[derive(Args, Debug)]
pub struct EquivCheck {
    #[arg(long, value_parser = parse_dims)]
    dims: Option<(usize, usize)>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    langs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
pub struct Params {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also report a single factored matrix of this shape
    #[arg(long, value_parser = parse_dims)]
    dims: Option<(usize, usize)>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    langs: Option<usize>,
    #[arg(long)]
    arch: Option<Architecture>,
}

#[derive(Args, Debug)]
pub struct Plot {
    /// Run directory holding metrics.csv; curves.dat and curves.gp are written there
    #[arg(long)]
    out: PathBuf,
}

fn parse_dims(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected D_IN,D_OUT")?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    match (parse(a)?, parse(b)?) {
        (0, _) | (_, 0) => Err("dimensions must be positive".into()),
        dims => Ok(dims),
    }
}

/// Summary JSON and whether every verification passed.
pub struct Outcome {
    pub summary: Value,
    pub verified: bool,
}

impl Outcome {
    fn ok(summary: Value) -> Self {
        Self {
            summary,
            verified: true,
        }
    }
}

pub fn run(command: Command) -> Result<Outcome> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::EquivCheck(a) => equiv_check(a),
        Command::Params(a) => params(a),
        Command::Plot(a) => plot(a),
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            TrainConfig::parse(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

fn corpus_for(config: &TrainConfig) -> Result<MultilingualCorpus> {
    Ok(generate_corpus(&TaskSpec::sample(&config.task_options(), config.seed)?)?)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n.max(1) as f64
}

fn gen_data(a: GenData) -> Result<Outcome> {
    let mut config = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let corpus = corpus_for(&config)?;
    let files = corpus.write_dir(&a.out).with_context(|| format!("writing corpus to {}", a.out.display()))?;
    Ok(Outcome::ok(json!({
        "command": "gen-data",
        "ok": true,
        "out": a.out,
        "seed": config.seed,
        "langs": corpus.spec.langs(),
        "symbols": corpus.spec.symbols,
        "train": corpus.train.len(),
        "dev": corpus.dev.len(),
        "test": corpus.test.len(),
        "files": files,
    })))
}

fn train_cmd(a: Train) -> Result<Outcome> {
    let mut config = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    if let Some(arch) = a.arch {
        config.architecture = arch;
    }
    if let Some(k) = a.k {
        config.k = k;
    }
    if let Some(langs) = a.langs {
        config.langs = langs;
    }
    if let Some(out) = &a.out {
        config.out_dir = out.display().to_string();
    }
    config.validate()?;
    let corpus = corpus_for(&config)?;
    let outcome = train(&config, &corpus)?;
    let out = PathBuf::from(&config.out_dir);
    outcome.save(&out).with_context(|| format!("writing run to {}", out.display()))?;
    let last = outcome.final_rows();
    for r in &last {
        println!("lang {}: dev token accuracy {:.4}, dev loss {:.4}", r.lang, r.token_acc, r.loss);
    }
    Ok(Outcome::ok(json!({
        "command": "train",
        "ok": true,
        "out": out,
        "arch": config.architecture.to_string(),
        "k": config.k,
        "seed": config.seed,
        "updates": config.updates,
        "best_step": outcome.best_step,
        "clipped_updates": outcome.clipped_updates,
        "final_token_accuracy": last.iter().map(|r| r.token_acc).collect::<Vec<_>>(),
        "mean_token_accuracy": mean(last.iter().map(|r| r.token_acc)),
    })))
}

fn eval(a: Eval) -> Result<Outcome> {
    let checkpoint =
        Checkpoint::<f64>::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let config = TrainConfig::parse(&checkpoint.config).context("checkpoint config echo")?;
    let corpus = corpus_for(&config)?;
    let metrics = evaluate_checkpoint(&checkpoint, &corpus.test)?;
    for m in &metrics {
        println!(
            "lang {}: token accuracy {:.4}, sequence error {:.4} over {} utterances",
            m.lang, m.token_accuracy, m.sequence_error, m.utterances
        );
    }
    Ok(Outcome::ok(json!({
        "command": "eval",
        "ok": true,
        "checkpoint": a.checkpoint,
        "step": checkpoint.step,
        "split": "test",
        "languages": metrics,
        "mean_token_accuracy": mean(metrics.iter().map(|m| m.token_accuracy)),
    })))
}

fn gradcheck(a: Gradcheck) -> Result<Outcome> {
    if a.k == 0 || a.langs == 0 {
        bail!("--k and --langs must be positive");
    }
    let archs = match a.arch {
        Some(arch) => vec![arch],
        None => vec![Architecture::Lstm, Architecture::Attention],
    };
    let seeds = a.seed.map_or_else(|| vec![0, 1, 2], |s| vec![s]);
    let dims = SuiteDims {
        linear: a.dims.unwrap_or(SuiteDims::default().linear),
        rank: a.k,
        langs: a.langs,
    };
    let checks = gradcheck_suite(&archs, dims, &seeds)?;
    println!("{:<26} {:>4} {:>13}  result", "component", "seed", "max rel err");
    let mut rows = Vec::new();
    for c in &checks {
        let passed = c.report.passed();
        let worst = c.report.worst().map(|w| w.name.clone()).unwrap_or_default();
        println!(
            "{:<26} {:>4} {:>13.3e}  {}",
            c.component,
            c.seed,
            c.report.max_rel_error(),
            if passed { "pass" } else { "FAIL" }
        );
        rows.push(json!({
            "component": c.component,
            "seed": c.seed,
            "max_rel_error": c.report.max_rel_error(),
            "worst_param": worst,
            "passed": passed,
        }));
    }
    let passed = checks.iter().all(|c| c.report.passed());
    Ok(Outcome {
        summary: json!({ "command": "gradcheck", "ok": true, "passed": passed, "checks": rows }),
        verified: passed,
    })
}

fn equiv_check(a: EquivCheck) -> Result<Outcome> {
    if a.k == Some(0) || a.langs == Some(0) {
        bail!("--k and --langs must be positive");
    }
    const CASES: usize = 200;
    let shape = SweepShape {
        dims: a.dims,
        rank: a.k,
        langs: a.langs,
    };
    let report = equivalence_sweep(shape, CASES, a.seed)?;
    let passed = report.passed();
    println!(
        "{} layers: max |fast - explicit| = {:.3e} ({})",
        report.cases,
        report.max_deviation,
        if passed { "pass" } else { "FAIL" }
    );
    Ok(Outcome {
        summary: json!({
            "command": "equiv-check",
            "ok": true,
            "cases": report.cases,
            "seed": a.seed,
            "max_deviation": report.max_deviation,
            "tolerance": EQUIV_TOLERANCE,
            "passed": passed,
        }),
        verified: passed,
    })
}

/// Number of per-language factor entries in a checkpoint, tallied from the
/// array names and element counts.
fn language_tally(checkpoint: &Checkpoint<f64>) -> usize {
    checkpoint
        .parameters()
        .filter(|a| {
            let parts: Vec<&str> = a.name.rsplitn(4, '.').collect();
            parts.len() == 4
                && matches!(parts[2], "r_m" | "s_m" | "r_a" | "s_a")
                && parts[0].parse::<usize>().is_ok()
                && parts[1].parse::<usize>().is_ok()
        })
        .map(|a| a.value.len())
        .sum()
}

fn params(a: Params) -> Result<Outcome> {
    let mut config = load_config(a.config.as_deref())?;
    if let Some(k) = a.k {
        config.k = k;
    }
    if let Some(langs) = a.langs {
        config.langs = langs;
    }
    if let Some(arch) = a.arch {
        config.architecture = arch;
    }
    config.validate()?;
    let mut store = ParamStore::new();
    let model = EncoderDecoderModel::new(&mut store, config.model_config())?;
    println!(
        "{:<32} {:>6} {:>6} {:>9} {:>12} {:>9}",
        "projection", "d_in", "d_out", "shared", "added/lang", "ratio"
    );
    let mut rows = Vec::new();
    for p in model.projections() {
        let (d_in, d_out) = (p.d_in(), p.d_out());
        let name = store.get(p.shared_weight()).name().trim_end_matches(".W_S").to_string();
        let added = match p {
            Projection::Factorized(f) => f.param_overhead().per_language_added,
            Projection::Shared(_) => 0,
        };
        let shared = d_in * d_out;
        let ratio = added as f64 / shared as f64;
        println!("{name:<32} {d_in:>6} {d_out:>6} {shared:>9} {added:>12} {:>8.3}%", 100.0 * ratio);
        rows.push(json!({ "projection": name, "d_in": d_in, "d_out": d_out, "shared": shared, "added_per_language": added }));
    }
    let added_per_language = model.added_params_per_language();
    let total = store.num_elements();
    let shared_total = total - added_per_language * config.langs;
    let checkpoint = Checkpoint::capture(&store, None, 0, &config.to_text());
    let tally = language_tally(&checkpoint);
    let matches = tally == added_per_language * config.langs;
    let fraction = added_per_language as f64 / shared_total as f64;
    println!(
        "shared {shared_total}, added per language {added_per_language} ({:.3}%), total {total}; checkpoint tally {tally} ({})",
        100.0 * fraction,
        if matches { "matches" } else { "MISMATCH" }
    );
    let mut summary = json!({
        "command": "params",
        "ok": true,
        "arch": config.architecture.to_string(),
        "k": config.k,
        "langs": config.langs,
        "projections": rows,
        "shared_params": shared_total,
        "added_per_language": added_per_language,
        "added_fraction_per_language": fraction,
        "total_params": total,
        "checkpoint_language_params": tally,
        "tally_matches": matches,
    });
    if let Some((d_in, d_out)) = a.dims {
        let added = 2 * config.k * (d_in + d_out);
        let shared = d_in * d_out;
        println!(
            "matrix {d_in}x{d_out}: shared {shared}, added per language {added} ({:.3}% for the pair, {:.3}% per factor)",
            100.0 * added as f64 / shared as f64,
            50.0 * added as f64 / shared as f64
        );
        summary["matrix"] = json!({
            "d_in": d_in,
            "d_out": d_out,
            "shared": shared,
            "added_per_language": added,
            "ratio": added as f64 / shared as f64,
            "per_factor_ratio": (config.k * (d_in + d_out)) as f64 / shared as f64,
        });
    }
    Ok(Outcome {
        summary,
        verified: matches,
    })
}

fn plot(a: Plot) -> Result<Outcome> {
    let metrics_path = a.out.join("metrics.csv");
    let rows = read_metrics(&metrics_path).with_context(|| format!("reading {}", metrics_path.display()))?;
    let langs = rows.iter().map(|r| r.lang + 1).max().unwrap_or(0);
    let mut steps: Vec<u64> = rows.iter().map(|r| r.step).collect();
    steps.dedup();
    let mut data = String::from("# step");
    for l in 0..langs {
        data.push_str(&format!(" loss_{l} acc_{l}"));
    }
    data.push('\n');
    for &step in &steps {
        data.push_str(&step.to_string());
        for l in 0..langs {
            match rows.iter().find(|r| r.step == step && r.lang == l) {
                Some(r) => data.push_str(&format!(" {} {}", r.loss, r.token_acc)),
                None => data.push_str(" NaN NaN"),
            }
        }
        data.push('\n');
    }
    let data_path = a.out.join("curves.dat");
    std::fs::write(&data_path, data)?;
    let curves = |offset: usize, what: &str| {
        (0..langs)
            .map(|l| format!("'curves.dat' using 1:{} with linespoints title '{what} lang {l}'", 2 + 2 * l + offset))
            .collect::<Vec<_>>()
            .join(", \\\n     ")
    };
    let script = format!(
        "set terminal pngcairo size 1000,400\nset output 'curves.png'\nset multiplot layout 1,2\n\
         set xlabel 'update'\nset ylabel 'dev loss'\nplot {}\n\
         set ylabel 'dev token accuracy'\nset yrange [0:1]\nplot {}\nunset multiplot\n",
        curves(0, "loss"),
        curves(1, "accuracy")
    );
    let script_path = a.out.join("curves.gp");
    std::fs::write(&script_path, script)?;
    println!("wrote {} and {}; run `gnuplot curves.gp` in {}", data_path.display(), script_path.display(), a.out.display());
    Ok(Outcome::ok(json!({
        "command": "plot",
        "ok": true,
        "data": data_path,
        "script": script_path,
        "points": steps.len(),
        "langs": langs,
    })))
}
