use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use pkdot::datagen;
use pkdot::experiment::{self, ExperimentConfig, GridKind};
use pkdot::trainer::Stage;
use pkdot::Error;

#[derive(Parser)]
#[command(name = "pkdot", version, about = "Privileged structural distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset as CSV and print a JSON summary.
    GenerateData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run seed whose dataset to write (defaults to the first configured seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one stage for every configured seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(Stage::CLI_NAMES))]
        stage: String,
        /// Output directory (overrides `output_dir` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one factor of the distillation objective.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = ["anchors", "epsilon", "batch"])]
        grid: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge final metrics of completed runs into one comparison table.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse { .. } => 2,
        Error::Io { .. } => 3,
        Error::MissingCheckpoint(_) => 4,
        Error::Divergence { .. } => 5,
        _ => 1,
    }
}

fn output_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> pkdot::Result<PathBuf> {
    out.or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))
}

fn generate_data(config: &Path, out: &Path, seed: Option<u64>) -> pkdot::Result<Value> {
    let cfg = ExperimentConfig::load(config)?;
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let ds = cfg.dataset(seed)?;
    datagen::save(&ds, out)?;
    let probes = datagen::probe_scores(&ds)?;
    eprintln!("wrote {} samples to {}", ds.len(), out.display());
    Ok(json!({
        "path": out,
        "seed": seed,
        "task": ds.task(),
        "n_samples": ds.len(),
        "n_train": ds.indices(datagen::Split::Train).len(),
        "n_val": ds.indices(datagen::Split::Val).len(),
        "class_counts": ds.class_counts(),
        "probe": probes,
    }))
}

fn train(config: &Path, stage: &str, out: Option<PathBuf>) -> pkdot::Result<Value> {
    let cfg = ExperimentConfig::load(config)?;
    let out = output_dir(&cfg, out)?;
    let stage = Stage::from_name(stage).ok_or_else(|| Error::Config(format!("unknown stage {stage}")))?;
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        eprintln!("training {} (seed {seed})", stage.name());
        let s = experiment::run_stage(&cfg, stage, seed, &out)?;
        eprintln!("  best epoch {}, validation {:?}", s.best_epoch, s.val_metrics);
        runs.push(s);
    }
    let report = experiment::report(&runs)?;
    Ok(json!({
        "stage": stage.name(),
        "out": out,
        "metric_names": report.metric_names,
        "mean": report.rows[0].mean,
        "std": report.rows[0].std,
        "runs": runs,
    }))
}

fn ablate(config: &Path, grid: &str, out: Option<PathBuf>) -> pkdot::Result<Value> {
    let cfg = ExperimentConfig::load(config)?;
    let out = output_dir(&cfg, out)?;
    let kind = GridKind::from_name(grid).ok_or_else(|| Error::Config(format!("unknown grid {grid}")))?;
    eprintln!("ablating {} over seeds {:?}", kind.name(), cfg.seeds);
    let (table, path) = experiment::run_ablation(&cfg, kind, &out)?;
    Ok(json!({
        "grid": kind.name(),
        "path": path,
        "rows": table.rows,
    }))
}

fn report(runs: &[PathBuf], out: &Path) -> pkdot::Result<Value> {
    let summaries = experiment::summaries(runs)?;
    let report = experiment::report(&summaries)?;
    experiment::write_report(&report, out)?;
    eprintln!("merged {} runs into {}", summaries.len(), out.display());
    Ok(json!({ "path": out, "report": report }))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenerateData { config, out, seed } => generate_data(config, out, *seed),
        Command::Train { config, stage, out } => train(config, stage, out.clone()),
        Command::Ablate { config, grid, out } => ablate(config, grid, out.clone()),
        Command::Report { runs, out } => report(runs, out),
    };
    match result {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json values serialize"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
