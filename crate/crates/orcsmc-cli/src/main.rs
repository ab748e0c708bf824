//! Command-line harness: simulate datasets, run replicated filtering
//! experiments, compute exact oracles, and analyze outputs against them.

mod analyze;
mod config;
mod dataset;
mod oracle_cmd;
mod run;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use orcsmc::stream::{StreamKey, STREAM_SIMULATE};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "orcsmc-cli",
    about = "Twisted and controlled sequential Monte Carlo experiment harness",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's base seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset from the configured model.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the configured algorithm over replicates against a dataset.
    Run {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset CSV produced by `simulate`.
        #[arg(long)]
        data: PathBuf,
        /// Overrides the config's replicate count.
        #[arg(long)]
        replicates: Option<usize>,
        /// Worker threads (default: ORCSMC_THREADS or all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Compute exact references (Kalman and/or grid filter) for a dataset.
    Oracle {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
    },
    /// Compare run outputs against an oracle file.
    Analyze {
        /// Run output directory; repeatable.
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        /// oracle.json produced by `oracle`.
        #[arg(long)]
        oracle: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn configure_threads(requested: Option<usize>) -> Result<()> {
    let n = requested.or_else(|| {
        std::env::var("ORCSMC_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("thread pool already initialised")?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate { common } => {
            let cfg = config::ExperimentConfig::load(&common.config)?;
            let model = cfg.model.build()?;
            let seed = common.seed.unwrap_or(cfg.run.seed);
            let mut rng = StreamKey::new(seed).child(STREAM_SIMULATE).step_rng(0);
            let (xs, ys) = model.simulate(cfg.run.horizon, &mut rng);
            std::fs::create_dir_all(&common.out)
                .with_context(|| format!("cannot create {}", common.out.display()))?;
            let path = common.out.join("dataset.csv");
            dataset::write_dataset(&path, &ys, &xs)?;
            println!("wrote {}", path.display());
        }
        Command::Run {
            common,
            data,
            replicates,
            threads,
        } => {
            configure_threads(threads)?;
            let cfg = config::ExperimentConfig::load(&common.config)?;
            run::cmd_run(&cfg, &data, &common.out, common.seed, replicates)?;
            println!("wrote {}", common.out.join("summary.json").display());
        }
        Command::Oracle { common, data } => {
            let cfg = config::ExperimentConfig::load(&common.config)?;
            oracle_cmd::cmd_oracle(&cfg, &data, &common.out)?;
            println!("wrote {}", common.out.join("oracle.json").display());
        }
        Command::Analyze { runs, oracle, out } => {
            analyze::cmd_analyze(&runs, &oracle, &out)?;
            println!("wrote {}", out.join("analysis.csv").display());
        }
    }
    Ok(())
}
