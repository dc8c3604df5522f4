//! Command-line front end: synthetic data generation, log preparation,
//! graph construction, training, evaluation, and scripted experiments.
//!
//! Exit codes: 0 success, 1 usage, 2 data problems, 3 numeric failures.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use duin_core::bench::{self, BenchData, BenchError};
use duin_core::checkpoint::{load_checkpoint, CheckpointError};
use duin_core::config::{ConfigError, TrainConfig};
use duin_core::data::synthetic::{generate_to_dir, SyntheticSpec};
use duin_core::data::{self, DataError, SplitMeta, Vocabs};
use duin_core::graph::{CoocGraph, GraphError};
use duin_core::metrics::{self, MetricsError};
use duin_core::tensor::TensorError;
use duin_core::trainer::{self, TrainError};

const TRAIN_SAMPLES: &str = "samples_train.tsv";
const VAL_SAMPLES: &str = "samples_val.tsv";
const TEST_SAMPLES: &str = "samples_test.tsv";
const SPLIT_META: &str = "split_meta.tsv";
const RESOLVED_CONFIG: &str = "config.resolved.txt";

#[derive(Parser)]
#[command(name = "duin", version, about = "Trigger-induced recommendation toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic behavior log with known session intents
    GenSynthetic(GenSyntheticArgs),
    /// Turn an event log into train/val/test samples plus vocabularies
    Prepare(PrepareArgs),
    /// Build the co-occurrence graph from training-period events
    BuildGraph(BuildGraphArgs),
    /// Train a model on prepared samples
    Train(TrainArgs),
    /// Score a sample file with a checkpoint and report ranking quality
    Eval(EvalArgs),
    /// Train the standard variant table across seeds
    Ablate(AblateArgs),
    /// Train one variant per value of a single config key
    Sweep(SweepArgs),
    /// Summarize a runs CSV, optionally with exact rank-sum significance
    Report(ReportArgs),
}

#[derive(Args)]
struct ConfigOpts {
    /// Config file of `key = value` lines; unknown keys are rejected
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline override, e.g. --set lr=0.01 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigOpts {
    fn resolve(&self) -> Result<TrainConfig, AppError> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path).map_err(usage)?;
        }
        for pair in &self.set {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| AppError::Usage(format!("--set expects KEY=VALUE, got `{pair}`")))?;
            cfg.set(key.trim(), value.trim()).map_err(usage)?;
        }
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenSyntheticArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = SyntheticSpec::default().n_sessions)]
    sessions: usize,
    #[arg(long, default_value_t = SyntheticSpec::default().n_users)]
    users: usize,
    #[arg(long, default_value_t = SyntheticSpec::default().n_items)]
    items: usize,
    #[arg(long, default_value_t = SyntheticSpec::default().n_attributes)]
    attributes: usize,
    #[arg(long, default_value_t = SyntheticSpec::default().noise_rate)]
    noise: f64,
    #[arg(long, default_value_t = SyntheticSpec::default().seed)]
    seed: u64,
    /// Intent probabilities `similar,trending,complementary`
    #[arg(long, default_value = "0.469,0.308,0.223")]
    mixture: String,
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigOpts,
}

#[derive(Args)]
struct BuildGraphArgs {
    #[arg(long)]
    events: PathBuf,
    /// Directory written by `prepare` (vocabularies and split boundary)
    #[arg(long)]
    prep: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigOpts,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    prep: PathBuf,
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigOpts,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sample TSV to score, e.g. the prepared test split
    #[arg(long)]
    data: PathBuf,
    /// Reference AUC for relative improvement
    #[arg(long)]
    base_auc: Option<f64>,
}

#[derive(Args)]
struct AblateArgs {
    /// Prepared samples; requires --graph. Omit both to self-generate
    /// the default synthetic dataset
    #[arg(long)]
    prep: Option<PathBuf>,
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Synthetic data seed for the self-generating mode
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Training seeds, comma separated
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigOpts,
}

#[derive(Args)]
struct SweepArgs {
    /// Config key to vary, e.g. tau, gamma, alpha
    #[arg(long)]
    param: String,
    /// Comma-separated values for the key
    #[arg(long)]
    values: String,
    #[arg(long)]
    prep: Option<PathBuf>,
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigOpts,
}

#[derive(Args)]
struct ReportArgs {
    /// Long-form runs CSV (`variant,seed,auc`) from ablate or sweep
    #[arg(long)]
    runs: PathBuf,
    /// Add an exact one-sided rank-sum p-value against the first variant
    #[arg(long)]
    significance: bool,
}

#[derive(Debug)]
enum AppError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl AppError {
    fn code(&self) -> i32 {
        match self {
            AppError::Usage(_) => 1,
            AppError::Data(_) => 2,
            AppError::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for AppError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AppError::Usage(m) | AppError::Data(m) | AppError::Numeric(m) => f.write_str(m),
        }
    }
}

fn usage(e: ConfigError) -> AppError {
    AppError::Usage(e.to_string())
}

impl From<DataError> for AppError {
    fn from(e: DataError) -> AppError {
        AppError::Data(e.to_string())
    }
}

impl From<GraphError> for AppError {
    fn from(e: GraphError) -> AppError {
        AppError::Data(e.to_string())
    }
}

impl From<CheckpointError> for AppError {
    fn from(e: CheckpointError) -> AppError {
        AppError::Data(e.to_string())
    }
}

impl From<MetricsError> for AppError {
    fn from(e: MetricsError) -> AppError {
        AppError::Data(e.to_string())
    }
}

impl From<TensorError> for AppError {
    fn from(e: TensorError) -> AppError {
        AppError::Numeric(e.to_string())
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> AppError {
        AppError::Data(e.to_string())
    }
}

impl From<TrainError> for AppError {
    fn from(e: TrainError) -> AppError {
        match e {
            TrainError::Config(inner) => usage(inner),
            TrainError::NonFinite { .. } => AppError::Numeric(e.to_string()),
            TrainError::Tensor(inner) => AppError::Numeric(inner.to_string()),
            other => AppError::Data(other.to_string()),
        }
    }
}

impl From<BenchError> for AppError {
    fn from(e: BenchError) -> AppError {
        match e {
            BenchError::Invalid(m) => AppError::Usage(m),
            BenchError::Data(inner) => inner.into(),
            BenchError::Graph(inner) => inner.into(),
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.code());
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    match cli.cmd {
        Cmd::GenSynthetic(args) => cmd_gen_synthetic(args),
        Cmd::Prepare(args) => cmd_prepare(args),
        Cmd::BuildGraph(args) => cmd_build_graph(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Ablate(args) => cmd_ablate(args),
        Cmd::Sweep(args) => cmd_sweep(args),
        Cmd::Report(args) => cmd_report(args),
    }
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, AppError> {
    text.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| AppError::Usage(format!("bad {what} entry `{v}`")))
        })
        .collect()
}

fn write_resolved_config(dir: &Path, cfg: &TrainConfig) -> Result<(), AppError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(RESOLVED_CONFIG), cfg.to_lines())?;
    Ok(())
}

fn cmd_gen_synthetic(args: GenSyntheticArgs) -> Result<(), AppError> {
    let mixture: Vec<f64> = parse_list(&args.mixture, "mixture")?;
    let [similar, trending, complementary] = mixture.as_slice() else {
        return Err(AppError::Usage(format!(
            "mixture needs exactly three probabilities, got {}",
            mixture.len()
        )));
    };
    let spec = SyntheticSpec {
        n_users: args.users,
        n_items: args.items,
        n_attributes: args.attributes,
        n_sessions: args.sessions,
        mixture: [*similar, *trending, *complementary],
        noise_rate: args.noise,
        seed: args.seed,
    };
    spec.validate().map_err(|e| AppError::Usage(e.to_string()))?;
    let (events, intents) = generate_to_dir(&spec, &args.out)?;
    println!("events {}", events.display());
    println!("intents {}", intents.display());
    Ok(())
}

fn cmd_prepare(args: PrepareArgs) -> Result<(), AppError> {
    let cfg = args.config.resolve()?;
    let report = data::read_events(&args.events)?;
    let assembled = data::assemble_samples(&report.events, &cfg)?;
    let n_assembled = assembled.samples.len();
    let (train, val, test) = data::split(assembled.samples)?;

    std::fs::create_dir_all(&args.out)?;
    data::write_samples(&args.out.join(TRAIN_SAMPLES), &train)?;
    data::write_samples(&args.out.join(VAL_SAMPLES), &val)?;
    data::write_samples(&args.out.join(TEST_SAMPLES), &test)?;
    let vocabs = Vocabs::build(&train);
    vocabs.save(&args.out)?;
    let meta = SplitMeta {
        n_train: train.len(),
        n_val: val.len(),
        n_test: test.len(),
        val_start_ts: val[0].ts,
    };
    meta.save(&args.out.join(SPLIT_META))?;
    write_resolved_config(&args.out, &cfg)?;

    println!("events {} (skipped {})", report.events.len(), report.skipped);
    println!(
        "samples {n_assembled} (dropped_no_trigger {})",
        assembled.dropped_no_trigger
    );
    println!("split train {} val {} test {}", train.len(), val.len(), test.len());
    Ok(())
}

fn cmd_build_graph(args: BuildGraphArgs) -> Result<(), AppError> {
    let cfg = args.config.resolve()?;
    let report = data::read_events(&args.events)?;
    let vocabs = Vocabs::load(&args.prep)?;
    let meta = SplitMeta::load(&args.prep.join(SPLIT_META))?;
    let sequences = data::behavior_sequences(&report.events, &vocabs, meta.val_start_ts);
    let graph = CoocGraph::build(&sequences, cfg.graph_window)?;
    graph.save(&args.out)?;
    println!("graph {} (window {})", args.out.display(), cfg.graph_window);
    Ok(())
}

fn load_prepared(prep: &Path, graph_dir: &Path) -> Result<BenchData, AppError> {
    let vocabs = Vocabs::load(prep)?;
    let train_raw = data::read_samples(&prep.join(TRAIN_SAMPLES))?;
    let val_raw = data::read_samples(&prep.join(VAL_SAMPLES))?;
    let graph = CoocGraph::load(graph_dir)?;
    Ok(BenchData {
        train: data::intern_samples(&vocabs, &train_raw),
        val: data::intern_samples(&vocabs, &val_raw),
        vocabs,
        graph,
    })
}

fn cmd_train(args: TrainArgs) -> Result<(), AppError> {
    let cfg = args.config.resolve()?;
    let bundle = load_prepared(&args.prep, &args.graph)?;
    write_resolved_config(&args.out, &cfg)?;
    let outcome = trainer::train(
        &cfg,
        &bundle.vocabs,
        &bundle.graph,
        &bundle.train,
        &bundle.val,
        Some(&args.out),
    )?;
    println!("steps {}", outcome.steps);
    match outcome.best_val_auc {
        Some(auc) => println!("best_val_auc {auc:.4}"),
        None => println!("best_val_auc -"),
    }
    println!(
        "checkpoint {}",
        args.out.join(trainer::CHECKPOINT_SUBDIR).display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), AppError> {
    let loaded = load_checkpoint(&args.checkpoint)?;
    let raw = data::read_samples(&args.data)?;
    let same_attr: Vec<bool> = raw.iter().map(data::RawSample::same_attr).collect();
    let labels: Vec<bool> = raw.iter().map(|s| s.label == 1).collect();
    let samples = data::intern_samples(&loaded.vocabs, &raw);
    let scores = trainer::score(&loaded.model, &loaded.graph, &samples)?;
    let report = metrics::evaluate(&scores, &labels, &same_attr, args.base_auc)?;

    let segment = |s: &metrics::SegmentAuc| match s.auc {
        Some(a) => format!("{a:.4} (pos {}, neg {})", s.n_pos, s.n_neg),
        None => format!("- (pos {}, neg {})", s.n_pos, s.n_neg),
    };
    println!("auc {:.4}", report.auc);
    println!("n_pos {} n_neg {}", report.n_pos, report.n_neg);
    println!("same_attr {}", segment(&report.same_attr));
    println!("cross_attr {}", segment(&report.cross_attr));
    println!("cross_segment_pairs {}", report.cross_segment_pairs);
    if let Some(relaimpr) = report.relaimpr_vs_base {
        println!("relaimpr_vs_base {relaimpr:.2}%");
    }
    Ok(())
}

fn resolve_bench_data(
    prep: &Option<PathBuf>,
    graph: &Option<PathBuf>,
    seed: u64,
    cfg: &TrainConfig,
) -> Result<BenchData, AppError> {
    match (prep, graph) {
        (Some(p), Some(g)) => load_prepared(p, g),
        (None, None) => {
            let spec = SyntheticSpec {
                seed,
                ..SyntheticSpec::default()
            };
            Ok(bench::prepare_synthetic(&spec, cfg)?)
        }
        _ => Err(AppError::Usage(
            "--prep and --graph must be given together".into(),
        )),
    }
}

fn run_and_write_matrix(
    matrix: &bench::ExperimentMatrix,
    data: &BenchData,
    out: &Path,
    table_name: &str,
    cfg: &TrainConfig,
) -> Result<(), AppError> {
    let outcome = bench::run_matrix(matrix, data)?;
    write_resolved_config(out, cfg)?;
    let table = bench::to_csv(&outcome);
    std::fs::write(out.join(table_name), &table)?;
    let runs_name = format!(
        "{}_runs.csv",
        table_name.strip_suffix(".csv").unwrap_or(table_name)
    );
    std::fs::write(out.join(runs_name), bench::runs_csv(&outcome))?;
    print!("{table}");
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<(), AppError> {
    let cfg = args.config.resolve()?;
    let seeds: Vec<u64> = parse_list(&args.seeds, "seeds")?;
    let data = resolve_bench_data(&args.prep, &args.graph, args.seed, &cfg)?;
    let matrix = bench::ablation_matrix(&cfg, seeds);
    run_and_write_matrix(&matrix, &data, &args.out, "ablation.csv", &cfg)
}

fn cmd_sweep(args: SweepArgs) -> Result<(), AppError> {
    let cfg = args.config.resolve()?;
    let seeds: Vec<u64> = parse_list(&args.seeds, "seeds")?;
    let values: Vec<String> = args
        .values
        .split(',')
        .map(|v| v.trim().to_string())
        .collect();
    let matrix = bench::sweep_matrix(&cfg, &args.param, &values, seeds)?;
    let data = resolve_bench_data(&args.prep, &args.graph, args.seed, &cfg)?;
    let table = format!("sweep_{}.csv", args.param);
    run_and_write_matrix(&matrix, &data, &args.out, &table, &cfg)
}

fn cmd_report(args: ReportArgs) -> Result<(), AppError> {
    let text = std::fs::read_to_string(&args.runs)?;
    let mut lines = text.lines();
    if lines.next() != Some("variant,seed,auc") {
        return Err(AppError::Data(format!(
            "{}: expected header `variant,seed,auc`",
            args.runs.display()
        )));
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<f64>> = HashMap::new();
    for (idx, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let [variant, _seed, auc] = fields.as_slice() else {
            return Err(AppError::Data(format!(
                "{}:{}: expected 3 fields",
                args.runs.display(),
                idx + 2
            )));
        };
        let auc: f64 = auc.parse().map_err(|_| {
            AppError::Data(format!("{}:{}: bad auc `{auc}`", args.runs.display(), idx + 2))
        })?;
        if !groups.contains_key(*variant) {
            order.push(variant.to_string());
        }
        groups.entry(variant.to_string()).or_default().push(auc);
    }
    if order.is_empty() {
        return Err(AppError::Data("runs file has no rows".into()));
    }

    let baseline = order[0].clone();
    let baseline_aucs = groups[&baseline].clone();
    if args.significance {
        println!(
            "{:<16} {:>3} {:>8} {:>8} {:>12}",
            "variant", "n", "mean", "std", format!("p_vs_{baseline}")
        );
    } else {
        println!("{:<16} {:>3} {:>8} {:>8}", "variant", "n", "mean", "std");
    }
    for name in &order {
        let aucs = &groups[name];
        let (mean, std) = metrics::mean_std(aucs);
        let std = std.map(|s| format!("{s:.4}")).unwrap_or_else(|| "-".into());
        if args.significance {
            let p = if name == &baseline {
                "-".to_string()
            } else {
                match metrics::rank_sum_p_value(&baseline_aucs, aucs) {
                    Ok(p) => format!("{p:.4}"),
                    Err(_) => "-".to_string(),
                }
            };
            println!("{name:<16} {:>3} {mean:>8.4} {std:>8} {p:>12}", aucs.len());
        } else {
            println!("{name:<16} {:>3} {mean:>8.4} {std:>8}", aucs.len());
        }
    }
    Ok(())
}
