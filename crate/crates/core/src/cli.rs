//! Command-line front end. Exit codes: 0 success, 1 usage, 2 data,
//! 3 numerical failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::arch::{infer_shapes, parse, LayerKind, PoolRounding, ShapeBindings};
use crate::data::{load_split, LabeledDataset, Split};
use crate::report::{export_embeddings, load_checkpoint, save_checkpoint, ReportError, RunMetrics};
use crate::stats::{class_stats, covariance, mean, pca2, scatter, trace, variance, WeightedSample};
use crate::train::{evaluate, train, Baseline, LossKind, OptimizerKind, TrainConfig, TrainError};

pub const DATA_ROOT_ENV: &str = "INTRACLASS_DATA";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "intraclass",
    version,
    about = "Embedding classifiers with learned class centroids"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the MNIST network and write metrics.toml and model.ckpt
    Train(TrainArgs),
    /// Recompute both accuracies from a checkpoint
    Eval(EvalArgs),
    /// Scatter and variance statistics of a labeled CSV point cloud
    Stats(StatsArgs),
    /// Validate an architecture file and print its shape chain
    ParseArch(ParseArchArgs),
    /// Write embeddings and centroids of a checkpoint as CSV
    Export(ExportArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Directory holding the IDX files (default: $INTRACLASS_DATA, then data/<dataset>)
    #[arg(long)]
    data_root: Option<PathBuf>,
}

fn parse_lambda(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("lambda must be finite and nonnegative, got {s}"))
    }
}

fn parse_dataset(s: &str) -> Result<String, String> {
    match s {
        "mnist" | "fashion-mnist" => Ok(s.to_string()),
        _ => Err(format!(
            "unknown dataset '{s}', expected mnist or fashion-mnist"
        )),
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, default_value = "mnist", value_parser = parse_dataset)]
    dataset: String,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    embed_dim: u64,
    /// Normalize embeddings to unit length
    #[arg(long)]
    normalize: bool,
    #[arg(long, default_value = "shannon+var")]
    loss: LossKind,
    /// Weight of the variance term; a comma-separated list runs one model per value
    #[arg(long, default_value = "0.05", value_delimiter = ',', allow_negative_numbers = true, value_parser = parse_lambda)]
    lambda: Vec<f64>,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    epochs: u64,
    #[arg(long, default_value_t = 256, value_parser = clap::value_parser!(u64).range(1..))]
    batch_size: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "adam")]
    optimizer: OptimizerKind,
    /// none, wen:ALPHA or sample:ALPHA
    #[arg(long, default_value = "none")]
    baseline: Baseline,
    /// Train on the first N training images
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    train_limit: Option<u64>,
    /// Evaluate on the first N test images
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    test_limit: Option<u64>,
    /// Repeat the run recorded in a metrics file (other model flags are ignored)
    #[arg(long)]
    from_metrics: Option<PathBuf>,
    /// Output directory
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// No per-epoch progress on stderr
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Debug, Args)]
struct StatsArgs {
    /// Rows `index,label,x_1..x_n`; `centroid` rows are skipped
    points: PathBuf,
    /// The third column is a raw sample weight
    #[arg(long)]
    weighted: bool,
}

#[derive(Debug, Args)]
struct ParseArchArgs {
    file: PathBuf,
    /// Input extent (overrides the one in the file)
    #[arg(long)]
    input: Option<usize>,
    /// Embedding dimension bound to `n`
    #[arg(long, default_value_t = 2)]
    n: usize,
    /// Class count bound to `K` and `P`
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Let pooling drop trailing rows and columns
    #[arg(long)]
    floor_pool: bool,
}

#[derive(Debug, Args)]
struct ExportArgs {
    checkpoint: PathBuf,
    /// CSV path; a `.pca.csv` companion is added when n > 2
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["train", "test"])]
    split: String,
    /// Export only the first N images of the split
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn usage_from(e: ReportError) -> Self {
        Failure::usage(e.to_string())
    }

    fn data(message: impl ToString) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.to_string(),
        }
    }

    fn numeric(message: impl ToString) -> Self {
        Self {
            code: EXIT_NUMERIC,
            message: message.to_string(),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Build(_) => Failure::usage(e.to_string()),
            TrainError::Diverged { .. } | TrainError::Network(_) => Failure::numeric(e),
        }
    }
}

impl From<ReportError> for Failure {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Network(_) => Failure::numeric(e),
            _ => Failure::data(e),
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Stats(a) => cmd_stats(a),
        Command::ParseArch(a) => cmd_parse_arch(a),
        Command::Export(a) => cmd_export(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn data_root(flag: &Option<PathBuf>, dataset: &str) -> PathBuf {
    if let Some(p) = flag {
        return p.clone();
    }
    if let Some(p) = std::env::var_os(DATA_ROOT_ENV) {
        return PathBuf::from(p);
    }
    Path::new("data").join(dataset)
}

fn load(root: &Path, split: Split, limit: Option<usize>) -> Result<LabeledDataset, Failure> {
    let ds = load_split(root, split).map_err(Failure::data)?;
    Ok(match limit {
        Some(n) if n < ds.len() => ds.head(n),
        _ => ds,
    })
}

fn fmt_lambda(v: f64) -> String {
    format!("lambda-{v}")
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let configs: Vec<TrainConfig> = match &a.from_metrics {
        Some(p) => vec![RunMetrics::load(p).map_err(Failure::usage_from)?.config],
        None => a
            .lambda
            .iter()
            .map(|&lambda| TrainConfig {
                dataset: a.dataset.clone(),
                embed_dim: a.embed_dim as usize,
                normalize: a.normalize,
                loss: a.loss,
                lambda,
                epochs: a.epochs as usize,
                batch_size: a.batch_size as usize,
                lr: a.lr,
                seed: a.seed,
                optimizer: a.optimizer,
                baseline: a.baseline,
                train_limit: a.train_limit.map(|n| n as usize),
                test_limit: a.test_limit.map(|n| n as usize),
            })
            .collect(),
    };
    for c in &configs {
        c.validate().map_err(|m| Failure::usage(format!("--{m}")))?;
    }
    let root = data_root(&a.data.data_root, &configs[0].dataset);
    let train_set = load(&root, Split::Train, None)?;
    let test_set = load(&root, Split::Test, configs[0].test_limit)?;
    for config in &configs {
        let out = if configs.len() > 1 {
            a.out.join(fmt_lambda(config.lambda))
        } else {
            a.out.clone()
        };
        fs::create_dir_all(&out).map_err(|e| Failure::data(format!("{}: {e}", out.display())))?;
        let total = config.epochs;
        let quiet = a.quiet;
        let (net, history) = train::<f32>(config, &train_set, |r| {
            if !quiet {
                eprintln!(
                    "epoch {}/{total}  l0 {:.6}  l_var {:.6}  total {:.6}",
                    r.epoch, r.l0, r.l_var, r.total
                );
            }
        })?;
        let used = config
            .train_limit
            .map_or(train_set.len(), |n| n.min(train_set.len()));
        let train_used = train_set.head(used);
        let eval = evaluate(&net, &train_used, &test_set).map_err(Failure::numeric)?;
        let metrics = RunMetrics::new(config, train_used.len(), test_set.len(), history, &eval);
        metrics.save(&out.join("metrics.toml"))?;
        save_checkpoint(&net, config, &out.join("model.ckpt"))?;
        println!(
            "{}: nearest-centroid {:.4}  max-score {:.4}",
            out.display(),
            eval.nearest_centroid,
            eval.max_score
        );
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    let (net, config) = load_checkpoint::<f32>(&a.checkpoint)?;
    let root = data_root(&a.data.data_root, &config.dataset);
    let train_set = load(&root, Split::Train, config.train_limit)?;
    let test_set = load(&root, Split::Test, config.test_limit)?;
    let eval = evaluate(&net, &train_set, &test_set).map_err(Failure::numeric)?;
    println!("nearest_centroid_accuracy = {}", eval.nearest_centroid);
    println!("max_score_accuracy = {}", eval.max_score);
    Ok(())
}

fn cmd_export(a: ExportArgs) -> Result<(), Failure> {
    let (net, config) = load_checkpoint::<f32>(&a.checkpoint)?;
    let root = data_root(&a.data.data_root, &config.dataset);
    let split = if a.split == "train" {
        Split::Train
    } else {
        Split::Test
    };
    let data = load(&root, split, a.limit)?;
    for p in export_embeddings(&net, &data, &a.out)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn read_points(path: &Path, weighted: bool) -> Result<WeightedSample, Failure> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    let (mut points, mut weights, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    let skip = if weighted { 3 } else { 2 };
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
        if rec.get(0).is_some_and(|f| f.trim() == "centroid") {
            continue;
        }
        let bad = |what: &str| Failure::data(format!("{}:{}: {what}", path.display(), line + 1));
        if rec.len() <= skip {
            return Err(bad("too few columns"));
        }
        let label: usize = rec[1].trim().parse().map_err(|_| bad("bad label"))?;
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad("bad number"));
        if weighted {
            weights.push(num(&rec[2])?);
        }
        points.push(
            rec.iter()
                .skip(skip)
                .map(num)
                .collect::<Result<Vec<_>, _>>()?,
        );
        labels.push(label);
    }
    let sample = if weighted {
        WeightedSample::normalized(points, weights, Some(labels))
    } else {
        WeightedSample::uniform_labeled(points, labels)
    };
    sample.map_err(Failure::data)
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("[{}]", parts.join(", "))
}

fn cmd_stats(a: StatsArgs) -> Result<(), Failure> {
    let sample = read_points(&a.points, a.weighted)?;
    let total = variance(&sample).map_err(Failure::numeric)?;
    let cs = class_stats(&sample).map_err(Failure::numeric)?;
    let between: f64 = cs
        .means
        .class_means
        .iter()
        .zip(&cs.means.class_masses)
        .map(|(m, p)| {
            p * m
                .iter()
                .zip(&cs.means.grand_mean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum();
    let mut out = String::new();
    let _ = writeln!(out, "points = {}", sample.len());
    let _ = writeln!(out, "dim = {}", sample.dim());
    let _ = writeln!(out, "mean = {}", fmt_vec(&mean(&sample)));
    let _ = writeln!(out, "variance = {total}");
    let _ = writeln!(
        out,
        "scatter = {}",
        scatter(&sample).map_err(Failure::numeric)?
    );
    let _ = writeln!(out, "trace_covariance = {}", trace(&covariance(&sample)));
    let _ = writeln!(out, "within_class_variance = {}", cs.within_variance);
    let _ = writeln!(
        out,
        "trace_within_covariance = {}",
        trace(&cs.within_covariance)
    );
    let _ = writeln!(out, "between_class_variance = {between}");
    let _ = writeln!(out, "classes = {:?}", cs.means.classes);
    let _ = writeln!(out, "class_masses = {}", fmt_vec(&cs.means.class_masses));
    if sample.dim() >= 2 && sample.len() >= 2 {
        if let Ok(p) = pca2(sample.points()) {
            let _ = writeln!(out, "pca2_eigenvalues = {}", fmt_vec(&p.eigenvalues));
        }
    }
    print!("{out}");
    Ok(())
}

fn cmd_parse_arch(a: ParseArchArgs) -> Result<(), Failure> {
    let text = fs::read_to_string(&a.file)
        .map_err(|e| Failure::data(format!("{}: {e}", a.file.display())))?;
    let graph = parse(&text).map_err(|e| Failure::usage(format!("{}: {e}", a.file.display())))?;
    let mut bindings = ShapeBindings::new(a.n, a.classes);
    if let Some(e) = a.input {
        bindings = bindings.with_input(e);
    }
    if a.floor_pool {
        bindings = bindings.with_pool_rounding(PoolRounding::Floor);
    }
    let shapes = infer_shapes(&graph, &bindings)
        .map_err(|e| Failure::usage(format!("{}: {e}", a.file.display())))?;
    let mut taps = Vec::new();
    for (spec, s) in graph.layers().iter().zip(&shapes) {
        if let Some(l) = &spec.label {
            taps.push(format!("{l}={}", s.output));
        }
        if matches!(spec.kind, LayerKind::Centers { .. }) {
            continue;
        }
        println!("{:>3}  {:<28} {}", s.layer, s.description, s.output);
    }
    println!("taps: {}", taps.join(" "));
    Ok(())
}
