//! Command-line front end: corpus generation, training, evaluation, and
//! single-query grounding.
//!
//! Exit codes: 0 success, 2 usage, 3 I/O, 4 numeric failure, 5 checkpoint
//! compatibility.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use caft::config::ModelConfig;
use caft::eval;
use caft::synth;
use caft::text;
use caft::train::{self, TrainConfig, TrainError, Variant};

#[derive(Parser)]
#[command(name = "caft", version, about = "Hierarchical image-text alignment at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus.
    Gen(GenArgs),
    /// Train a model variant on a corpus.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out split.
    Eval(EvalArgs),
    /// Ground a single text query against one image.
    Ground(GroundArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Flat `key = value` config file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    canvas: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directory from `gen`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Model preset: desk | paper.
    #[arg(long)]
    preset: Option<String>,
    /// caft | flat-loss | no-part | plain-vit | flat-text.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Fraction of the corpus used for training.
    #[arg(long)]
    split_fraction: Option<f64>,
    /// Seed for the train/test shuffle (defaults to --seed).
    #[arg(long)]
    split_seed: Option<u64>,
    /// Continue from an existing checkpoint in --out.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Comma-separated list of blend weights in [0, 1].
    #[arg(long)]
    alphas: Option<String>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    split_fraction: Option<f64>,
    #[arg(long)]
    split_seed: Option<u64>,
    /// Directory for per-query heatmap/mask PGMs.
    #[arg(long)]
    artifacts: Option<PathBuf>,
}

#[derive(Args)]
struct GroundArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Input image (binary PPM).
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    text: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Vocabulary file from the training corpus.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// Optional ground-truth mask (PGM) for an IoU line.
    #[arg(long)]
    truth_mask: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Io(String),
    Numeric(String),
    Compat(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Compat(_) => 5,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Numeric(m) | CliError::Compat(m) => m,
        }
    }
}

fn usage<T: ToString>(e: T) -> CliError {
    CliError::Usage(e.to_string())
}

fn io_err<T: ToString>(e: T) -> CliError {
    CliError::Io(e.to_string())
}

fn from_train_error(e: TrainError) -> CliError {
    match e {
        TrainError::NonFiniteGrad(_) => CliError::Numeric(e.to_string()),
        TrainError::Tensor(ref t) if matches!(t, caft::TensorError::NonFinite { .. }) => {
            CliError::Numeric(e.to_string())
        }
        TrainError::ConfigMismatch | TrainError::BadCheckpoint(_) => CliError::Compat(e.to_string()),
        TrainError::Io(_) => CliError::Io(e.to_string()),
        other => CliError::Usage(other.to_string()),
    }
}

fn from_eval_error(e: eval::EvalError) -> CliError {
    match e {
        eval::EvalError::Io(_) => CliError::Io(e.to_string()),
        eval::EvalError::Tensor(ref t) if matches!(t, caft::TensorError::NonFinite { .. }) => {
            CliError::Numeric(e.to_string())
        }
        other => CliError::Usage(other.to_string()),
    }
}

/// Flat `key = value` file. Blank lines and `#` comments are ignored;
/// unknown keys are rejected against the caller's allow-list.
fn read_config(path: &Path, allowed: &[&str]) -> Result<HashMap<String, String>, CliError> {
    let body = std::fs::read_to_string(path).map_err(io_err)?;
    let mut out = HashMap::new();
    for (ln, line) in body.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(usage(format!("{}:{}: expected `key = value`", path.display(), ln + 1)));
        };
        let k = k.trim().to_string();
        if !allowed.contains(&k.as_str()) {
            return Err(usage(format!("{}: unknown config key `{k}`", path.display())));
        }
        out.insert(k, v.trim().to_string());
    }
    Ok(out)
}

/// defaults <- config file <- command-line flag, in that order.
fn resolve<T: std::str::FromStr + Clone>(
    flag: &Option<T>,
    file: &HashMap<String, String>,
    key: &str,
    default: Option<T>,
) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    if let Some(v) = flag {
        return Ok(v.clone());
    }
    if let Some(raw) = file.get(key) {
        return raw
            .parse()
            .map_err(|e| usage(format!("config key `{key}`: {e}")));
    }
    default.ok_or_else(|| usage(format!("missing required setting `{key}`")))
}

const DEFAULT_SPLIT_FRACTION: f64 = 8.0 / 9.0;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Ground(a) => cmd_ground(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn cmd_gen(a: GenArgs) -> Result<(), CliError> {
    let allowed = ["seed", "count", "canvas", "out"];
    let file = match &a.config {
        Some(p) => read_config(p, &allowed)?,
        None => HashMap::new(),
    };
    let seed: u64 = resolve(&a.seed, &file, "seed", Some(0))?;
    let count: usize = resolve(&a.count, &file, "count", None)?;
    let canvas: usize = resolve(&a.canvas, &file, "canvas", Some(32))?;
    let out: PathBuf = resolve(&a.out, &file, "out", None)?;
    if count == 0 {
        return Err(usage("--count must be positive"));
    }
    if canvas < 16 {
        return Err(usage("--canvas must be at least 16"));
    }
    println!("config: seed={seed} count={count} canvas={canvas} out={}", out.display());
    let samples = synth::generate(seed, count, canvas).map_err(|e| usage(e.to_string()))?;
    synth::write_corpus(&out, &samples).map_err(io_err)?;
    let vocab = synth::vocabulary_words();
    println!("wrote {} samples, vocabulary size {}", samples.len(), vocab.len() + 4);
    Ok(())
}

fn load_corpus(data: &Path) -> Result<(Vec<synth::AnnotatedSample>, text::Vocabulary), CliError> {
    let samples = synth::read_corpus(data).map_err(io_err)?;
    let vocab = text::Vocabulary::from_file(&data.join("vocab.txt")).map_err(io_err)?;
    Ok((samples, vocab))
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let allowed = [
        "data", "preset", "variant", "seed", "out", "epochs", "batch", "lr",
        "weight_decay", "warmup", "split_fraction", "split_seed",
    ];
    let file = match &a.config {
        Some(p) => read_config(p, &allowed)?,
        None => HashMap::new(),
    };
    let data: PathBuf = resolve(&a.data, &file, "data", None)?;
    let preset: String = resolve(&a.preset, &file, "preset", Some("desk".to_string()))?;
    let variant_s: String = resolve(&a.variant, &file, "variant", Some("caft".to_string()))?;
    let seed: u64 = resolve(&a.seed, &file, "seed", Some(0))?;
    let out: PathBuf = resolve(&a.out, &file, "out", None)?;

    let variant: Variant = variant_s.parse().map_err(usage)?;
    let (samples, vocab) = load_corpus(&data)?;
    let cfg = ModelConfig::by_name(&preset, vocab.len())
        .ok_or_else(|| usage(format!("unknown preset `{preset}`")))?;

    let mut tc = TrainConfig::desk();
    tc.seed = seed;
    tc.variant = variant;
    tc.epochs = resolve(&a.epochs, &file, "epochs", Some(tc.epochs))?;
    tc.batch = resolve(&a.batch, &file, "batch", Some(tc.batch))?;
    tc.lr = resolve(&a.lr, &file, "lr", Some(tc.lr))?;
    tc.weight_decay = resolve(&a.weight_decay, &file, "weight_decay", Some(tc.weight_decay))?;
    tc.warmup = resolve(&a.warmup, &file, "warmup", Some(tc.warmup))?;
    let split_fraction: f64 =
        resolve(&a.split_fraction, &file, "split_fraction", Some(DEFAULT_SPLIT_FRACTION))?;
    let split_seed: u64 = resolve(&a.split_seed, &file, "split_seed", Some(seed))?;

    println!(
        "config: data={} preset={preset} variant={} seed={seed} out={} epochs={} batch={} lr={} weight_decay={} warmup={} split_fraction={split_fraction} split_seed={split_seed}",
        data.display(), variant.name(), out.display(), tc.epochs, tc.batch, tc.lr, tc.weight_decay, tc.warmup,
    );

    let (train_set, _) =
        synth::corpus_split(&samples, split_fraction, split_seed).map_err(usage)?;
    train::train(&train_set, &vocab, &cfg, &tc, &out, a.resume).map_err(from_train_error)?;
    println!(
        "done: checkpoint {} metrics {}",
        out.join("checkpoint.bin").display(),
        out.join("metrics.csv").display()
    );
    Ok(())
}

fn parse_alphas(raw: &str) -> Result<Vec<f64>, CliError> {
    let mut out = Vec::new();
    for part in raw.split(',') {
        let a: f64 = part
            .trim()
            .parse()
            .map_err(|_| usage(format!("malformed alpha `{part}`")))?;
        if !(0.0..=1.0).contains(&a) {
            return Err(usage(format!("alpha {a} outside [0, 1]")));
        }
        out.push(a);
    }
    if out.is_empty() {
        return Err(usage("empty alpha list"));
    }
    Ok(out)
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let allowed = [
        "data", "ckpt", "alphas", "report", "preset", "split_fraction", "split_seed", "artifacts",
    ];
    let file = match &a.config {
        Some(p) => read_config(p, &allowed)?,
        None => HashMap::new(),
    };
    let data: PathBuf = resolve(&a.data, &file, "data", None)?;
    let ckpt: PathBuf = resolve(&a.ckpt, &file, "ckpt", None)?;
    let alphas_raw: String = resolve(&a.alphas, &file, "alphas", Some("0.0".to_string()))?;
    let report_path: PathBuf = resolve(&a.report, &file, "report", None)?;
    let preset: String = resolve(&a.preset, &file, "preset", Some("desk".to_string()))?;
    let split_fraction: f64 =
        resolve(&a.split_fraction, &file, "split_fraction", Some(DEFAULT_SPLIT_FRACTION))?;

    let alphas = parse_alphas(&alphas_raw)?;
    let (samples, vocab) = load_corpus(&data)?;
    let cfg = ModelConfig::by_name(&preset, vocab.len())
        .ok_or_else(|| usage(format!("unknown preset `{preset}`")))?;
    let loaded = train::checkpoint_load(&ckpt, &cfg).map_err(from_train_error)?;
    let split_seed: u64 = resolve(&a.split_seed, &file, "split_seed", Some(loaded.seed))?;

    println!(
        "config: data={} ckpt={} alphas={alphas_raw} report={} preset={preset} variant={} split_fraction={split_fraction} split_seed={split_seed}",
        data.display(), ckpt.display(), report_path.display(), loaded.variant.name(),
    );

    let (_, test_set) = synth::corpus_split(&samples, split_fraction, split_seed).map_err(usage)?;
    if let Some(dir) = &a.artifacts {
        std::fs::create_dir_all(dir).map_err(io_err)?;
    }
    let report = eval::evaluate(
        &loaded.store,
        &cfg,
        loaded.variant,
        &test_set,
        &vocab,
        &alphas,
        a.artifacts.as_deref(),
    )
    .map_err(from_eval_error)?;
    std::fs::write(&report_path, report.render()).map_err(io_err)?;
    print!("{}", report.render());
    Ok(())
}

fn cmd_ground(a: GroundArgs) -> Result<(), CliError> {
    let allowed = ["ckpt", "image", "text", "out", "vocab", "preset", "truth_mask"];
    let file = match &a.config {
        Some(p) => read_config(p, &allowed)?,
        None => HashMap::new(),
    };
    let ckpt: PathBuf = resolve(&a.ckpt, &file, "ckpt", None)?;
    let image_path: PathBuf = resolve(&a.image, &file, "image", None)?;
    let query: String = resolve(&a.text, &file, "text", None)?;
    let out: PathBuf = resolve(&a.out, &file, "out", None)?;
    let vocab_path: PathBuf = resolve(&a.vocab, &file, "vocab", None)?;
    let preset: String = resolve(&a.preset, &file, "preset", Some("desk".to_string()))?;
    if query.trim().is_empty() {
        return Err(usage("--text must be non-empty"));
    }

    let vocab = text::Vocabulary::from_file(&vocab_path).map_err(io_err)?;
    let cfg = ModelConfig::by_name(&preset, vocab.len())
        .ok_or_else(|| usage(format!("unknown preset `{preset}`")))?;
    let loaded = train::checkpoint_load(&ckpt, &cfg).map_err(from_train_error)?;
    let image = synth::read_ppm(&image_path).map_err(io_err)?;

    println!(
        "config: ckpt={} image={} out={} preset={preset} variant={}",
        ckpt.display(), image_path.display(), out.display(), loaded.variant.name(),
    );

    let g = caft::params::Graph::frozen(&loaded.store);
    let hierarchy = caft::vision::encode_image(&g, &cfg, &image, loaded.variant.grouping())
        .map_err(|e| usage(e.to_string()))?;

    let truth = match &a.truth_mask {
        Some(p) => {
            let (w, h, bytes) = synth::read_pgm(p).map_err(io_err)?;
            if w != image.width || h != image.height {
                return Err(usage("truth mask dimensions do not match the image"));
            }
            Some(bytes.iter().map(|&b| b > 127).collect::<Vec<bool>>())
        }
        None => None,
    };
    let res = eval::ground_query(&loaded.store, &cfg, &hierarchy, &query, &vocab, truth.as_deref())
        .map_err(from_eval_error)?;

    std::fs::create_dir_all(&out).map_err(io_err)?;
    eval::write_heatmap_pgm(&out.join("heatmap.pgm"), &hierarchy, &res).map_err(from_eval_error)?;
    eval::write_mask_pgm(&out.join("mask.pgm"), &hierarchy, &res).map_err(from_eval_error)?;
    if let Some(t) = &truth {
        let mass: f64 = res
            .heatmap
            .iter()
            .zip(t)
            .filter_map(|(&h, &m)| m.then_some(h))
            .sum();
        println!("mass_inside_mask {mass:.6}");
        println!("iou {:.6}", res.iou.unwrap_or(0.0));
    }
    println!("wrote {} and {}", out.join("heatmap.pgm").display(), out.join("mask.pgm").display());
    Ok(())
}
