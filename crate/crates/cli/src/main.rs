use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use stud::experiment::{self, RunOutcome};
use stud::ExperimentConfig;

/// Unknown distillation experiments on simulated proposal streams.
#[derive(Parser)]
#[command(name = "stud", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate, train, evaluate and write all reports (or a sweep of runs).
    Run {
        config: PathBuf,
        /// Overrides `output_dir` from the config file.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Overrides both the simulator and the trainer seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check a config file for errors without running it.
    Validate { config: PathBuf },
    /// Write the training stream of a config as a line-delimited record file.
    Simulate {
        config: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Dump the held-out evaluation videos instead.
        #[arg(long)]
        eval: bool,
    },
}

fn load(path: &Path, output_dir: Option<PathBuf>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(dir) = output_dir {
        config.output_dir = dir;
    }
    if let Some(seed) = seed {
        config = config.with_seed(seed);
    }
    Ok(config)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Run {
            config,
            output_dir,
            seed,
        } => {
            let config = load(&config, output_dir, seed)?;
            match experiment::run(&config)? {
                RunOutcome::Single(artifacts) => {
                    for r in &artifacts.reports {
                        println!("{:<7} fpr95 = {:.4}  auroc = {:.4}", r.method.name(), r.fpr95, r.auroc);
                    }
                }
                RunOutcome::Sweep(rows) => {
                    println!("axis_value,fpr95,auroc");
                    for row in rows {
                        println!("{},{:.4},{:.4}", row.value, row.fpr95, row.auroc);
                    }
                }
            }
            println!("outputs in {}", config.output_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { config } => {
            let report = experiment::validate(&config);
            for w in &report.warnings {
                println!("warning: {w}");
            }
            for e in &report.errors {
                println!("error: {e}");
            }
            if report.is_ok() {
                println!("{}: ok", config.display());
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Simulate { config, out, eval } => {
            let config = load(&config, None, None)?;
            let run = config.resolve_run()?;
            let (train_stream, eval_stream) = experiment::streams(&run)?;
            let videos = if eval { eval_stream } else { train_stream };
            let file = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            stud::io::write_stream(BufWriter::new(file), &videos)
                .with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} videos to {}", videos.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
