//! `fenec` command-line front end.
//!
//! Exit codes: 0 success, 2 invalid configuration or usage, 3 data or I/O
//! problems, 4 numerical failures (for example a covariance that is not
//! positive definite).

mod config;

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub use config::{DataSection, RunConfig, TrainingSection};

use crate::error::{FenecError, Result};
use crate::feature_store::{
    build_task_stream, load_feature_file, load_split_file, read_feature_header, TaskStream,
};
use crate::fenec::FenecModel;
use crate::params::Method;
use crate::protocol::{
    aggregate_runs, evaluate, fit_task_step, run_protocol, RunReport, RunSummary,
};

#[derive(Debug, Parser)]
#[command(
    name = "fenec",
    version,
    about = "Exemplar-free class-incremental classifiers over extracted features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the full class-incremental protocol for every seed.
    Run(RunArgs),
    /// Fit one or more tasks and write a model dump.
    Fit(FitArgs),
    /// Score a model on a feature file or on a task's cumulative test set.
    Eval(EvalArgs),
    /// Print a model dump's header.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed list (repeatable).
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long, default_value = "fenec-out")]
    out: PathBuf,
    /// Validate the config and print the parameter count without fitting.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    config: PathBuf,
    /// 1-based task index to fit (repeatable, applied in order).
    #[arg(long = "task", required = true)]
    tasks: Vec<usize>,
    /// Seed for a new model; defaults to the config's first seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Which of the config's split files to use.
    #[arg(long, default_value_t = 0)]
    split_index: usize,
    /// Existing model to extend.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Output model path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Labelled FENC file to score.
    #[arg(long, conflicts_with_all = ["config", "task"])]
    features: Option<PathBuf>,
    #[arg(long, requires = "task")]
    config: Option<PathBuf>,
    /// 1-based task whose cumulative test set is scored.
    #[arg(long, requires = "config")]
    task: Option<usize>,
    #[arg(long, default_value_t = 0)]
    split_index: usize,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
}

/// Parses `args`, runs the subcommand and returns the process exit code.
pub fn main_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    let result = match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::Fit(a) => cmd_fit(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Inspect(a) => cmd_inspect(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("FENEC_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            FenecError::Config(format!(
                "FENEC_THREADS must be a positive integer, got {value:?}"
            ))
        })?;
    // a pool may already exist when embedded; that is not an error
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

fn load_stream(cfg: &RunConfig, split: &Path) -> Result<TaskStream> {
    let train = load_feature_file(&cfg.data.train_features)?;
    let test = load_feature_file(&cfg.data.test_features)?;
    let split = load_split_file(split)?;
    build_task_stream(&train, &test, &split)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| FenecError::io(path, e))
}

#[derive(Serialize)]
struct DryRun {
    method: Method,
    n_classes: usize,
    n_features: usize,
    n_clusters: usize,
    parameter_count: usize,
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    summary: &'a RunSummary,
    reports: &'a [RunReport],
    config: &'a RunConfig,
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if !args.seeds.is_empty() {
        cfg.seeds = args.seeds.clone();
        cfg.validate()?;
    }

    if args.dry_run {
        let (_, n_features) = read_feature_header(&cfg.data.train_features)?;
        let split = load_split_file(cfg.split_for_run(0))?;
        let n_classes = split.iter().flatten().collect::<BTreeSet<_>>().len();
        let dry = DryRun {
            method: cfg.hyper.method,
            n_classes,
            n_features,
            n_clusters: cfg.hyper.n_clusters,
            parameter_count: cfg.hyper.parameter_count(n_classes, n_features),
        };
        println!(
            "{}",
            serde_json::to_string_pretty(&dry).expect("serializable")
        );
        return Ok(());
    }

    fs::create_dir_all(&args.out).map_err(|e| FenecError::io(&args.out, e))?;
    let mut reports = Vec::with_capacity(cfg.seeds.len());
    for (i, &seed) in cfg.seeds.iter().enumerate() {
        log::info!("run {}/{} with seed {seed}", i + 1, cfg.seeds.len());
        let stream = load_stream(&cfg, cfg.split_for_run(i))?;
        let train_cfg = cfg.train_config(seed);
        let report = run_protocol(&stream, &cfg.hyper, train_cfg.as_ref(), seed)?;
        write_json(&args.out.join(format!("report_{seed}.json")), &report)?;
        reports.push(report);
    }
    let summary = aggregate_runs(&reports)?;
    write_json(
        &args.out.join("summary.json"),
        &SummaryFile {
            summary: &summary,
            reports: &reports,
            config: &cfg,
        },
    )?;
    let csv_path = args.out.join("curve.csv");
    fs::write(&csv_path, summary.curve_csv()).map_err(|e| FenecError::io(&csv_path, e))?;
    println!(
        "average incremental accuracy {:.4}, last task accuracy {:.4} over {} run(s)",
        summary.average_incremental_accuracy.mean, summary.last_task_accuracy.mean, summary.n_runs
    );
    Ok(())
}

fn task_index(stream: &TaskStream, task: usize) -> Result<usize> {
    if task == 0 || task > stream.len() {
        return Err(FenecError::Config(format!(
            "task {task} out of range 1..={}",
            stream.len()
        )));
    }
    Ok(task - 1)
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let split = cfg.data.splits.get(args.split_index).ok_or_else(|| {
        FenecError::Config(format!("no split file at index {}", args.split_index))
    })?;
    let mut model = match &args.model {
        Some(path) => {
            let model = FenecModel::load(path)?;
            if model.hyper() != &cfg.hyper {
                return Err(FenecError::Config(
                    "model hyperparameters differ from the config".into(),
                ));
            }
            if args.seed.is_some_and(|s| s != model.seed()) {
                return Err(FenecError::Config(format!(
                    "model was created with seed {}",
                    model.seed()
                )));
            }
            model
        }
        None => FenecModel::new(cfg.hyper.clone(), args.seed.unwrap_or(cfg.seeds[0]))?,
    };
    let stream = load_stream(&cfg, split)?;
    let train_cfg = cfg.train_config(model.seed());
    for &task in &args.tasks {
        let t = task_index(&stream, task)?;
        if model.hyper().method == Method::FenecLog && model.head().is_none() && t != 0 {
            return Err(FenecError::Config(
                "fenec_log must fit task 1 first to train its head".into(),
            ));
        }
        fit_task_step(&mut model, stream.tasks()[t].train(), train_cfg.as_ref())?;
        log::info!(
            "fitted task {task}; model holds {} classes",
            model.n_classes()
        );
    }
    model.save(&args.out)
}

#[derive(Serialize)]
struct EvalOutput {
    accuracy: f64,
    n_samples: usize,
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let model = FenecModel::load(&args.model)?;
    let batch = match (&args.features, &args.config, args.task) {
        (Some(path), _, _) => load_feature_file(path)?,
        (None, Some(config), Some(task)) => {
            let cfg = RunConfig::load(config)?;
            let split = cfg.data.splits.get(args.split_index).ok_or_else(|| {
                FenecError::Config(format!("no split file at index {}", args.split_index))
            })?;
            let stream = load_stream(&cfg, split)?;
            stream.tasks()[task_index(&stream, task)?].test()
        }
        _ => {
            return Err(FenecError::Config(
                "eval needs --features or --config with --task".into(),
            ))
        }
    };
    if let Some(f) = model.n_features() {
        if f != batch.n_features() {
            return Err(FenecError::Shape(format!(
                "model expects {f} features, data has {}",
                batch.n_features()
            )));
        }
    }
    let accuracy = evaluate(&model, &batch)?;
    println!(
        "{}",
        serde_json::to_string(&EvalOutput {
            accuracy,
            n_samples: batch.n_samples(),
        })
        .expect("serializable")
    );
    Ok(())
}

#[derive(Serialize)]
struct InspectOutput {
    header: crate::fenec::ModelHeader,
    n_classes: usize,
    class_ids: Vec<u32>,
    parameter_count: usize,
}

fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    let model = FenecModel::load(&args.model)?;
    let out = InspectOutput {
        header: model.header(),
        n_classes: model.n_classes(),
        class_ids: model.class_ids().collect(),
        parameter_count: model.parameter_count(),
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&out).expect("serializable")
    );
    Ok(())
}
