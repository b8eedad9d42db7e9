//! `amalgam`: train, evaluate and analyse amalgamated optimizers.

use std::path::PathBuf;
use std::process::ExitCode;

use amalgam_core::harness::{self, ExperimentConfig};
use anyhow::Context;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "amalgam", version, about = "Distill a pool of optimizers into one learned optimizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tune the pool, meta-train every replicate and save checkpoints.
    Train(Common),
    /// Run each checkpoint on held-out problems and write evaluation.csv.
    Evaluate(Common),
    /// Summarize evaluation.csv into stability.csv.
    Stability(Common),
    /// Plot evaluation.csv as report.svg.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config).with_context(|| format!("reading {}", self.config.display()))?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(c) => {
            let report = harness::cmd_train(&c.load()?)?;
            for m in &report.pool {
                println!("pool {} lr={}", m.kind, m.hyper.lr);
            }
            for r in &report.replicates {
                println!(
                    "replicate {} seed={} unroll={} validation_meta_loss={} -> {}",
                    r.replicate,
                    r.seed,
                    r.final_unroll,
                    r.final_validation,
                    r.checkpoint.display()
                );
            }
        }
        Command::Evaluate(c) => println!("{}", harness::cmd_evaluate(&c.load()?)?.display()),
        Command::Stability(c) => println!("{}", harness::cmd_stability(&c.load()?)?.display()),
        Command::Report(c) => println!("{}", harness::cmd_report(&c.load()?)?.display()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
