use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;
use sfae::config::ExperimentConfig;
use sfae::runner::{self, RunOutcome};

/// Exit codes: 0 success, 1 failed cells, failed verification or runtime
/// error, 2 invalid configuration or arguments.
#[derive(Parser)]
#[command(name = "sfae", version, about = "Structural feature-autoencoder experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every (kind, selection, seed) cell of a config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Overrides the config's worker count.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Compare feature-extractor layer selections for feature_ae.
    Ablation {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Rebuild tables and figures from the cell results in a run directory.
    Report { dir: PathBuf },
    /// Check config hashes and checksums, then rerun cells and compare.
    Verify {
        dir: PathBuf,
        /// Number of cells to rerun (0 checks hashes only).
        #[arg(long, default_value_t = usize::MAX)]
        rerun: usize,
    },
}

const CONFIG_ERROR: u8 = 2;

fn load(config: &std::path::Path, output: Option<PathBuf>, workers: Option<usize>) -> sfae::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(o) = output {
        cfg.output_dir = o;
    }
    if let Some(w) = workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn finish_run(outcome: sfae::Result<RunOutcome>) -> ExitCode {
    match outcome {
        Ok(o) => {
            for r in &o.report.reports {
                println!(
                    "{:<28} pixel_ap {:.3}±{:.3}  dice {:.3}±{:.3}  auroc {:.3}±{:.3}",
                    r.method, r.pixel_ap.mean, r.pixel_ap.std, r.dice_at_5fpr.mean, r.dice_at_5fpr.std, r.image_auroc.mean, r.image_auroc.std
                );
            }
            println!("results in {}", o.dir.display());
            if o.failed() {
                for f in &o.report.failures {
                    error!("{} failed: {}", f.cell.key(), f.error);
                }
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => fail(e),
    }
}

fn fail(e: sfae::Error) -> ExitCode {
    error!("{e}");
    ExitCode::from(if e.is_config() { CONFIG_ERROR } else { 1 })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, output, workers } => match load(&config, output, workers) {
            Ok(cfg) => finish_run(runner::run_experiment(&cfg)),
            Err(e) => fail(e),
        },
        Command::Ablation { config, output, workers } => match load(&config, output, workers) {
            Ok(cfg) => finish_run(runner::run_ablation(&cfg)),
            Err(e) => fail(e),
        },
        Command::Report { dir } => match runner::rebuild_report(&dir) {
            Ok(r) => {
                println!("{} rows, {} missing cells", r.reports.len(), r.failures.len());
                if r.failures.is_empty() {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(1)
                }
            }
            Err(e) => fail(e),
        },
        Command::Verify { dir, rerun } => match runner::verify(&dir, rerun) {
            Ok(v) => {
                for e in v.hash_errors.iter().chain(&v.mismatches) {
                    error!("{e}");
                }
                println!("config {}: {} cells rerun, {}", v.config_hash, v.rerun_cells, if v.ok() { "verified" } else { "MISMATCH" });
                if v.ok() {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(1)
                }
            }
            Err(e) => fail(e),
        },
    }
}
