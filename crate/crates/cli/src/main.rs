mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gkde_core::analysis::{report_csv, sweep, SweepConfig};
use gkde_core::bank::ModelBank;
use gkde_core::eval::{evaluate_bank, summary, write_metrics_csv};
use gkde_core::network::Activation;
use gkde_core::objective::RepulsionPrior;
use gkde_core::stream::{ingest_csv, synth_blobs, write_csv, BlobConfig, TaskPartition, TaskStream};
use gkde_core::train::train_stream;
use gkde_core::{Error, Result};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "gkde", version, about = "Density-based online class-incremental learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic blob stream as CSV plus its task partition.
    GenData(GenData),
    /// Train a model bank task by task and write per-task metrics.
    Train(Box<Train>),
    /// Evaluate a saved bank on a stream.
    Eval(Eval),
    /// Classify one input row with a saved bank.
    Predict(Predict),
    /// Monte-Carlo bias/variance report for the plain Gaussian KDE.
    Analyze(Analyze),
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 5)]
    tasks: usize,
    #[arg(long, default_value_t = 2)]
    classes_per_task: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 8.0)]
    sep: f64,
    #[arg(long, default_value_t = 100)]
    samples_per_class: usize,
    #[arg(long, default_value_t = 1.0)]
    cluster_std: f64,
    #[arg(long, default_value_t = 4.0)]
    center_spread: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination.
    #[arg(long)]
    out: PathBuf,
    /// Task partition destination (JSON).
    #[arg(long)]
    partition: PathBuf,
}

/// Keys shared by `train` and `eval`; each overrides the config file.
#[derive(Args)]
struct RunFlags {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    partition: Option<PathBuf>,
    #[arg(long)]
    label_column: Option<String>,
    /// The CSV has no header row.
    #[arg(long)]
    no_header: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    run: RunFlags,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    classes_per_task: Option<usize>,
    #[arg(long)]
    input_dim: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    samples_per_class: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long)]
    anchors_per_class: Option<usize>,
    #[arg(long)]
    clip_threshold: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long, value_parser = parse_activation)]
    activation: Option<Activation>,
    #[arg(long)]
    refresh_anchors_every_epoch: bool,
    #[arg(long, value_parser = parse_repulsion)]
    repulsion_prior: Option<RepulsionPrior>,
    /// Output directory for the model bank.
    #[arg(long)]
    bank: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Also write the plain-text summary here.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[command(flatten)]
    run: RunFlags,
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
struct Predict {
    #[arg(long)]
    bank: PathBuf,
    /// Comma-separated feature values.
    #[arg(long, allow_hyphen_values = true, value_delimiter = ',', required = true)]
    input: Vec<f64>,
}

#[derive(Args)]
struct Analyze {
    /// JSON file with any of: density, z, bandwidths, sample_sizes, replications, seed.
    #[arg(long)]
    config: Option<PathBuf>,
    /// normal1d, normal2d or mixture1d.
    #[arg(long)]
    density: Option<String>,
    #[arg(long, allow_hyphen_values = true, value_delimiter = ',')]
    z: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    bandwidths: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    sample_sizes: Option<Vec<usize>>,
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_activation(s: &str) -> std::result::Result<Activation, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("expected tanh or relu, got `{s}`"))
}

fn parse_repulsion(s: &str) -> std::result::Result<RepulsionPrior, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("expected per_class or anchor_class, got `{s}`"))
}

fn base_config(run: &RunFlags) -> Result<RunConfig> {
    let mut c = match &run.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &run.data {
        c.data = Some(v.clone());
    }
    if let Some(v) = &run.partition {
        c.partition = Some(v.clone());
    }
    if let Some(v) = &run.label_column {
        c.label_column = v.clone();
    }
    if run.no_header {
        c.header = false;
    }
    if let Some(v) = run.seed {
        c.seed = v;
    }
    Ok(c)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn load_stream(c: &RunConfig) -> Result<TaskStream> {
    match (&c.data, &c.partition) {
        (Some(data), Some(partition)) => ingest_csv(data, &c.csv_options(), &TaskPartition::load(partition)?, c.seed),
        _ => synth_blobs(&c.blob_config()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

fn gen_data(a: GenData) -> Result<()> {
    let stream = synth_blobs(&BlobConfig {
        tasks: a.tasks,
        classes_per_task: a.classes_per_task,
        dim: a.dim,
        separation: a.sep,
        samples_per_class: a.samples_per_class,
        cluster_std: a.cluster_std,
        center_spread: a.center_spread,
        seed: a.seed,
    })?;
    write_csv(&stream, &a.out)?;
    stream.partition().save(&a.partition)?;
    let rows: usize = stream.tasks().iter().map(|t| t.train().len() + t.test().len()).sum();
    println!("wrote {rows} rows, {} tasks, to {}", stream.len(), a.out.display());
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let mut c = base_config(&a.run)?;
    set(&mut c.tasks, a.tasks);
    set(&mut c.classes_per_task, a.classes_per_task);
    set(&mut c.input_dim, a.input_dim);
    set(&mut c.separation, a.separation);
    set(&mut c.samples_per_class, a.samples_per_class);
    set(&mut c.embed_dim, a.embed_dim);
    set(&mut c.bandwidth, a.bandwidth);
    set(&mut c.anchors_per_class, a.anchors_per_class);
    set(&mut c.clip_threshold, a.clip_threshold);
    set(&mut c.epochs, a.epochs);
    set(&mut c.warmup_epochs, a.warmup_epochs);
    set(&mut c.learning_rate, a.learning_rate);
    set(&mut c.weight_decay, a.weight_decay);
    set(&mut c.batch_size, a.batch_size);
    set(&mut c.hidden, a.hidden);
    set(&mut c.activation, a.activation);
    set(&mut c.repulsion_prior, a.repulsion_prior);
    if a.refresh_anchors_every_epoch {
        c.refresh_anchors_every_epoch = true;
    }
    set(&mut c.bank_path, a.bank.map(Some));
    set(&mut c.metrics_path, a.metrics.map(Some));
    c.validate()?;
    let bank_path = c.bank_path.clone().ok_or_else(|| Error::config("bank_path", "an output directory is required"))?;
    let metrics_path = c.metrics_path.clone().ok_or_else(|| Error::config("metrics_path", "an output file is required"))?;

    let stream = load_stream(&c)?;
    let report = train_stream(&stream, &c.train_config())?;
    for s in &report.stages {
        println!("task {}: tp {:.4} wp {:.4} overall {:.4}", s.task_id, s.tp_acc, s.wp_acc, s.overall_acc);
    }
    report.bank.save(&bank_path)?;
    write_metrics_csv(&report.stages, &metrics_path)?;
    let text = summary(&report.matrix, &report.stages);
    print!("{text}");
    if let Some(p) = a.summary {
        write_text(&p, &text)?;
    }
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let c = base_config(&a.run)?;
    c.validate()?;
    let bank = ModelBank::load(&a.bank)?;
    let stream = load_stream(&c)?;
    let (matrix, stages) = evaluate_bank(bank.entries(), bank.clip(), &stream)?;
    if let Some(p) = &a.metrics {
        write_metrics_csv(&stages, p)?;
    }
    let text = summary(&matrix, &stages);
    print!("{text}");
    if let Some(p) = a.summary {
        write_text(&p, &text)?;
    }
    Ok(())
}

fn predict(a: Predict) -> Result<()> {
    let bank = ModelBank::load(&a.bank)?;
    let p = bank.predict(&a.input)?;
    println!("task_id: {}", p.task_id);
    println!("class_label: {}", p.class_label);
    println!("tp_score: {:?}", p.tp_score);
    println!("tp_probability: {:?}", p.tp_probability);
    println!("wp_posterior: {:?}", p.wp_posterior);
    println!("combined_log_prob: {:?}", p.combined_log_prob);
    Ok(())
}

fn analyze(a: Analyze) -> Result<()> {
    let mut c = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str::<SweepConfig>(&text).map_err(|e| Error::config("config", format!("{}: {e}", p.display())))?
        }
        None => SweepConfig::default(),
    };
    set(&mut c.density, a.density);
    set(&mut c.z, a.z);
    set(&mut c.bandwidths, a.bandwidths);
    set(&mut c.sample_sizes, a.sample_sizes);
    set(&mut c.replications, a.replications);
    set(&mut c.seed, a.seed);
    let reports = sweep(&c)?;
    write_text(&a.out, &report_csv(&reports))?;
    println!("wrote {} rows to {}", reports.len(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(*a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Analyze(a) => analyze(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
