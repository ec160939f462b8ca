use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use tavlab_cli::commands::{self, Context, COMMANDS};
use tavlab_cli::config::ExperimentConfig;
use tavlab_cli::validate::{all_passed, validate_dir, validate_subdir, CheckResult};

/// Task arithmetic experiments on small MLPs.
#[derive(Parser)]
#[command(name = "tavlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the task family.
    GenTasks(RunArgs),
    /// Finetune the base model on each task.
    Finetune(RunArgs),
    /// Compare the task-arithmetic merge with multitask training.
    Merge(RunArgs),
    /// Scan the merge/multitask gap over a step-size grid.
    GapScan(RunArgs),
    /// Measure the gap bounds against their constants.
    Bounds(RunArgs),
    /// Gradient dominance and cosine similarity along finetuning.
    Dominance(RunArgs),
    /// One-epoch versus converged task vectors over a merge-weight sweep.
    Horizon(RunArgs),
    /// PCA of the iterative merge trajectory.
    Pca(RunArgs),
    /// Run every subcommand.
    All(RunArgs),
    /// Check a directory of artifacts.
    Validate { dir: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output root; defaults to the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;

fn report(results: &[CheckResult]) -> bool {
    for r in results {
        if r.passed {
            println!("{}", r.line());
        } else {
            eprintln!("{}", r.line());
        }
    }
    all_passed(results)
}

fn set_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("TAVLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| format!("TAVLAB_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn load(args: &RunArgs) -> Result<ExperimentConfig, String> {
    let mut cfg = ExperimentConfig::load(&args.config).map_err(|e| e.to_string())?;
    if let Some(eta) = args.eta {
        cfg.train.eta = eta;
    }
    if let Some(alpha) = args.alpha {
        cfg.train.alpha = alpha;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()
        .map_err(|(field, msg)| format!("{}: field `{field}`: {msg}", args.config.display()))?;
    Ok(cfg)
}

fn run(args: &RunArgs, which: &[&str]) -> ExitCode {
    let cfg = match load(args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let dirs = Context::new(cfg, args.out.clone()).and_then(|ctx| commands::run_many(&ctx, which));
    match dirs {
        Ok(dirs) => {
            let results: Vec<CheckResult> = dirs.iter().flat_map(|d| validate_subdir(d)).collect();
            if report(&results) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_FAILURE)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}

fn validate(dir: &Path) -> ExitCode {
    if report(&validate_dir(dir)) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_FAILURE)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = set_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_USAGE);
    }
    match &cli.command {
        Command::GenTasks(a) => run(a, &["gen-tasks"]),
        Command::Finetune(a) => run(a, &["finetune"]),
        Command::Merge(a) => run(a, &["merge"]),
        Command::GapScan(a) => run(a, &["gap-scan"]),
        Command::Bounds(a) => run(a, &["bounds"]),
        Command::Dominance(a) => run(a, &["dominance"]),
        Command::Horizon(a) => run(a, &["horizon"]),
        Command::Pca(a) => run(a, &["pca"]),
        Command::All(a) => run(a, &COMMANDS),
        Command::Validate { dir } => validate(dir),
    }
}
