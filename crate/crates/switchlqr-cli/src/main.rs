use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use switchlqr_cli::config::ExperimentConfig;
use switchlqr_cli::experiment::{plot_summary, run_experiment};
use switchlqr_cli::selftest::selftest;

/// Online safe switching for switched LQR systems: experiments and checks.
#[derive(Parser)]
#[command(name = "switchlqr", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the learning algorithm experiment described by a config file.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the known-parameter reference strategy on the same scenario.
    Baseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a switch-count sweep with regret aggregation per point.
    RegretSweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the built-in verification suites.
    Selftest,
    /// Render charts from an existing summary JSON.
    Plot {
        #[arg(long)]
        summary: PathBuf,
    },
}

fn load(config: &PathBuf, seed: Option<u64>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn execute(cfg: &ExperimentConfig, baseline: bool) -> anyhow::Result<bool> {
    let bundle = run_experiment(cfg, baseline)?;
    println!("summary: {}", bundle.summary_path.display());
    for p in &bundle.svg_paths {
        println!("chart:   {}", p.display());
    }
    println!("traces:  {}", bundle.trace_paths.len());
    if !bundle.all_ok {
        eprintln!("note: some replicates did not complete; see the summary for details");
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: anyhow::Result<bool> = (|| match cli.command {
        Command::Simulate { config, seed } => execute(&load(&config, seed)?, false),
        Command::Baseline { config, seed } => execute(&load(&config, seed)?, true),
        Command::RegretSweep { config, seed } => {
            let cfg = load(&config, seed)?;
            if cfg.ns_sweep.is_none() {
                anyhow::bail!("regret-sweep requires ns_sweep in the config");
            }
            execute(&cfg, false)
        }
        Command::Selftest => {
            let report = selftest(None);
            print!("{}", report.table());
            Ok(report.all_passed())
        }
        Command::Plot { summary } => {
            for p in plot_summary(&summary)? {
                println!("chart: {}", p.display());
            }
            Ok(true)
        }
    })();
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
