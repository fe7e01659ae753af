use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use hiericrf::chain::{build_schedule, render_template, DEFAULT_MASK};
use hiericrf::data::{load_examples, read_jsonl, save_examples, write_jsonl, CorpusRecord, Example, PredictionRecord};
use hiericrf::emission::file::load_emissions;
use hiericrf::fewshot::greedy_sample;
use hiericrf::icrf::train::{fit, TrainConfig};
use hiericrf::icrf::{DecodeResult, Mode, DEFAULT_TAU_HARD, DEFAULT_TAU_SOFT};
use hiericrf::metrics::{evaluate, Sample};
use hiericrf::model::{ExternalEmissions, Model, ModelConfig};
use hiericrf::synthgen::{generate, SynthSpec};
use hiericrf::taxonomy::Taxonomy;
use hiericrf::{Error, Result};

#[derive(Parser)]
#[command(name = "hiericrf", version, about = "Hierarchical iterative CRF for few-shot hierarchical text classification")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand. Model-shape flags only matter when a
/// model is built (`train`); saved models carry their own configuration.
#[derive(Args)]
struct Global {
    /// Taxonomy JSON file.
    #[arg(long, global = true)]
    taxonomy: Option<PathBuf>,
    /// RNG seed; required by `sample`, `train` and `synth`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Transition initialization: faithful or strict.
    #[arg(long, global = true, default_value_t = Mode::Faithful)]
    mode: Mode,
    /// Chain iterations.
    #[arg(long, global = true, default_value_t = hiericrf::chain::DEFAULT_ITERATIONS)]
    iters: usize,
    /// Replace CRF decoding with an independent per-slot argmax.
    #[arg(long, global = true)]
    no_icrf: bool,
    /// Use the ascending-only schedule.
    #[arg(long, global = true)]
    no_chain: bool,
    /// Precomputed emissions file; replaces the built-in surrogate.
    #[arg(long, global = true)]
    emissions: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the prompt template and its level schedule.
    Template {
        /// Taxonomy depth (defaults to the depth of --taxonomy).
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long, default_value = "[TEXT]")]
        text: String,
        #[arg(long, default_value = DEFAULT_MASK)]
        mask: String,
    },
    /// Draw a K-shot support set from a corpus.
    Sample {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a support set.
    Train(TrainArgs),
    /// Score a model on labelled data, or score a predictions file.
    Eval {
        #[arg(long, requires = "data", conflicts_with = "predictions")]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// JSONL of {"id", "pred", "gold"} records to score instead of a model.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, default_value = "metrics.json")]
        out: PathBuf,
        /// Also write per-example predictions as JSONL.
        #[arg(long)]
        predictions_out: Option<PathBuf>,
    },
    /// Decode a single text, or every record of a corpus.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, conflicts_with = "data")]
        text: Option<String>,
        /// Example id used to look up external emissions for --text.
        #[arg(long, default_value = "input")]
        id: String,
        #[arg(long, requires = "out")]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic taxonomy and corpus.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    /// Dev set for early stopping; without it the last epoch is kept.
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr_crf: f64,
    #[arg(long, default_value_t = 1e-2)]
    lr_features: f64,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    /// Hashed feature dimension (power of two, at least 1024).
    #[arg(long, default_value_t = hiericrf::emission::DEFAULT_DIM)]
    dim: usize,
    /// Scale of the name-initialized verbalizer rows.
    #[arg(long, default_value_t = 1.0)]
    gain: f64,
    #[arg(long, default_value_t = DEFAULT_TAU_SOFT, allow_negative_numbers = true)]
    tau_soft: f64,
    #[arg(long, default_value_t = DEFAULT_TAU_HARD, allow_negative_numbers = true)]
    tau_hard: f64,
    /// Write the per-epoch training log as JSON.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    branching: usize,
    #[arg(long, default_value_t = 3)]
    depth: usize,
    #[arg(long, default_value_t = 3)]
    signatures: usize,
    #[arg(long, default_value_t = 30)]
    doc_len: usize,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 8)]
    train_per_path: usize,
    #[arg(long, default_value_t = 4)]
    dev_per_path: usize,
    #[arg(long, default_value_t = 10)]
    test_per_path: usize,
    #[arg(long, default_value_t = 200)]
    filler_vocab: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Template { depth, text, mask } => cmd_template(g, *depth, text, mask),
        Command::Sample { corpus, k, out } => cmd_sample(g, corpus, *k, out),
        Command::Train(args) => cmd_train(g, args),
        Command::Eval { model, data, predictions, out, predictions_out } => {
            cmd_eval(g, model.as_deref(), data.as_deref(), predictions.as_deref(), out, predictions_out.as_deref())
        }
        Command::Predict { model, text, id, data, out } => {
            cmd_predict(g, model, text.as_deref(), id, data.as_deref(), out.as_deref())
        }
        Command::Synth(args) => cmd_synth(g, args),
    }
}

fn taxonomy(g: &Global) -> Result<Taxonomy> {
    let path = g
        .taxonomy
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("--taxonomy is required".into()))?;
    Taxonomy::load(path)
}

fn seed(g: &Global) -> Result<u64> {
    g.seed
        .ok_or_else(|| Error::InvalidArgument("--seed is required for this command".into()))
}

fn iterations(g: &Global) -> usize {
    if g.no_chain {
        0
    } else {
        g.iters
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn cmd_template(g: &Global, depth: Option<usize>, text: &str, mask: &str) -> Result<()> {
    if mask.is_empty() {
        return Err(Error::InvalidArgument("--mask must not be empty".into()));
    }
    let depth = match (depth, &g.taxonomy) {
        (Some(d), _) => d,
        (None, Some(_)) => taxonomy(g)?.depth(),
        (None, None) => return Err(Error::InvalidArgument("pass --depth or --taxonomy".into())),
    };
    let schedule = build_schedule(depth, iterations(g))?;
    println!("{}", render_template(text, &schedule, mask));
    print_json(&serde_json::json!({ "levels": schedule.levels(), "l": schedule.len() }))
}

fn cmd_sample(g: &Global, corpus: &Path, k: usize, out: &Path) -> Result<()> {
    let seed = seed(g)?;
    let tax = taxonomy(g)?;
    let examples = load_examples(corpus, &tax)?;
    let sampled = greedy_sample(&examples, &tax, k, seed)?;
    save_examples(out, &sampled.support.examples, &tax)?;
    eprintln!("wrote {} examples to {}", sampled.support.examples.len(), out.display());
    if !sampled.is_complete() {
        let missing = sampled
            .shortfall
            .iter()
            .map(|s| format!("{} ({} available)", s.path.join("/"), s.available))
            .collect();
        return Err(Error::InsufficientData(missing));
    }
    Ok(())
}

fn cmd_train(g: &Global, a: &TrainArgs) -> Result<()> {
    let seed = seed(g)?;
    let tax = taxonomy(g)?;
    let config = ModelConfig {
        iterations: g.iters,
        mode: g.mode,
        tau_soft: a.tau_soft,
        tau_hard: a.tau_hard,
        no_icrf: g.no_icrf,
        no_chain: g.no_chain,
        feature_dim: a.dim,
        verbalizer_gain: a.gain,
    };
    let train = load_examples(&a.train, &tax)?;
    let dev = match &a.dev {
        Some(p) => load_examples(p, &tax)?,
        None => Vec::new(),
    };
    let external = match &g.emissions {
        Some(path) => {
            let l = build_schedule(tax.depth(), config.effective_iterations())?.len();
            Some(ExternalEmissions::load(path, tax.len(), l)?)
        }
        None => None,
    };
    let model = Model::new(&tax, config, external)?;
    let train_config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr_crf: a.lr_crf,
        lr_features: a.lr_features,
        patience: a.patience,
        seed,
    };
    let (model, log) = fit(model, &train, &dev, &tax, &train_config)?;
    model.save(&a.out)?;
    if let Some(path) = &a.log {
        write_json(path, &log)?;
    }
    match (log.best_epoch, log.best_dev_micro_f1) {
        (Some(e), Some(f1)) => eprintln!("kept epoch {e} (dev micro-F1 {f1:.4}); model written to {}", a.out.display()),
        _ => eprintln!("model written to {}", a.out.display()),
    }
    Ok(())
}

/// Load a model, attaching external emissions when the model needs them.
fn load_model(g: &Global, path: &Path) -> Result<Model> {
    let external = match &g.emissions {
        Some(p) => {
            let (header, records) = load_emissions(p)?;
            Some((header, ExternalEmissions::from_records(records)))
        }
        None => None,
    };
    let header = external.as_ref().map(|(h, _)| *h);
    let model = Model::load(path, external.map(|(_, t)| t))?;
    if let Some(h) = header {
        if h.labels as usize != model.header.labels || h.length as usize != model.schedule.len() {
            return Err(Error::Shape(format!(
                "emissions file is l={} m={}, model expects l={} m={}",
                h.length,
                h.labels,
                model.schedule.len(),
                model.header.labels
            )));
        }
    }
    Ok(model)
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("HIERICRF_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::InvalidArgument(format!("HIERICRF_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

fn prediction_records(examples: &[Example], decoded: &[DecodeResult], tax: &Taxonomy) -> Vec<PredictionRecord> {
    examples
        .iter()
        .zip(decoded)
        .map(|(ex, d)| PredictionRecord {
            id: ex.id.clone(),
            pred: tax.path_names(&d.per_level),
            gold: tax.path_names(&ex.path),
        })
        .collect()
}

fn cmd_eval(
    g: &Global,
    model: Option<&Path>,
    data: Option<&Path>,
    predictions: Option<&Path>,
    out: &Path,
    predictions_out: Option<&Path>,
) -> Result<()> {
    configure_threads()?;
    let tax = taxonomy(g)?;
    let report = match (model, data, predictions) {
        (Some(model), Some(data), None) => {
            let model = load_model(g, model)?;
            model.check_taxonomy(&tax)?;
            let examples = load_examples(data, &tax)?;
            let (decoded, report) = model.evaluate(&examples, &tax)?;
            if let Some(path) = predictions_out {
                write_jsonl(path, &prediction_records(&examples, &decoded, &tax))?;
            }
            report
        }
        (None, None, Some(path)) => {
            let records: Vec<PredictionRecord> = read_jsonl(path)?;
            let samples = records
                .iter()
                .map(|r| {
                    let ids = |names: &[String]| names.iter().map(|n| tax.id_of(n)).collect::<Result<Vec<_>>>();
                    Ok(Sample::new(ids(&r.pred)?, ids(&r.gold)?))
                })
                .collect::<Result<Vec<_>>>()?;
            evaluate(&samples, &tax)?
        }
        _ => {
            return Err(Error::InvalidArgument(
                "pass either --model with --data, or --predictions".into(),
            ))
        }
    };
    write_json(out, &report)?;
    eprintln!(
        "micro {:.4} macro {:.4} c-micro {:.4} c-macro {:.4} p-micro {:.4} p-macro {:.4}",
        report.micro_f1, report.macro_f1, report.c_micro_f1, report.c_macro_f1, report.p_micro_f1, report.p_macro_f1
    );
    Ok(())
}

#[derive(Serialize)]
struct PredictOutput {
    id: String,
    path: Vec<String>,
    sequence: Vec<String>,
    levels: Vec<usize>,
    score: f64,
    log_partition: f64,
}

fn cmd_predict(
    g: &Global,
    model_path: &Path,
    text: Option<&str>,
    id: &str,
    data: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let tax = taxonomy(g)?;
    let model = load_model(g, model_path)?;
    model.check_taxonomy(&tax)?;
    match (text, data, out) {
        (Some(text), None, _) => {
            let ex = Example { id: id.to_string(), text: text.to_string(), path: Vec::new() };
            let d = model.predict(&ex)?;
            print_json(&PredictOutput {
                id: ex.id,
                path: tax.path_names(&d.per_level),
                sequence: tax.path_names(&d.sequence),
                levels: model.schedule.levels().to_vec(),
                score: d.score,
                log_partition: d.log_partition,
            })
        }
        (None, Some(data), Some(out)) => {
            configure_threads()?;
            let records: Vec<CorpusRecord> = read_jsonl(data)?;
            let examples = records
                .iter()
                .map(|r| {
                    if r.path.is_empty() {
                        Ok(Example { id: r.id.clone(), text: r.text.clone(), path: Vec::new() })
                    } else {
                        Example::resolve(r, &tax)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let decoded = model.predict_all(&examples)?;
            write_jsonl(out, &prediction_records(&examples, &decoded, &tax))?;
            eprintln!("wrote {} predictions to {}", decoded.len(), out.display());
            Ok(())
        }
        _ => Err(Error::InvalidArgument("pass --text, or --data with --out".into())),
    }
}

fn cmd_synth(g: &Global, a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        branching: a.branching,
        depth: a.depth,
        signatures: a.signatures,
        doc_len: a.doc_len,
        noise: a.noise,
        train_per_path: a.train_per_path,
        dev_per_path: a.dev_per_path,
        test_per_path: a.test_per_path,
        filler_vocab: a.filler_vocab,
        seed: seed(g)?,
    };
    let data = generate(&spec)?;
    fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("taxonomy.json"), &data.taxonomy.to_doc())?;
    for (name, split) in [("train", &data.train), ("dev", &data.dev), ("test", &data.test)] {
        save_examples(a.out.join(format!("{name}.jsonl")), split, &data.taxonomy)?;
    }
    write_json(&a.out.join("spec.json"), &spec)?;
    eprintln!(
        "{} labels, {} leaf paths, {}/{}/{} documents in {}",
        data.taxonomy.len(),
        data.taxonomy.leaf_paths().len(),
        data.train.len(),
        data.dev.len(),
        data.test.len(),
        a.out.display()
    );
    Ok(())
}
