use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crra_cli::{CliError, ExperimentConfig, RunOptions};

#[derive(Parser)]
#[command(name = "crra", version, about = "Risk-constrained CRRA portfolio experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve every scenario of a configuration and write the results.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; falls back to `output.dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Only this scenario (`unconstrained` for the baseline).
        #[arg(long)]
        scenario: Option<String>,
        /// Compare closed-form risks and projections against Monte Carlo
        /// and brute-force oracles and add the results to the summary.
        #[arg(long)]
        oracle_checks: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let Command::Run { config, out, seed, scenario, oracle_checks } = Cli::parse().command;
    let result = (|| -> Result<(), CliError> {
        let cfg = ExperimentConfig::load(&config)?;
        let dir = out
            .or_else(|| cfg.output.dir.clone())
            .ok_or_else(|| CliError::Config("no output directory: pass --out or set output.dir".into()))?;
        let out = crra_cli::run(&cfg, &RunOptions { seed, scenario, oracle_checks }, &dir)?;
        for flag in &out.summary.flags {
            log::warn!("{flag}");
        }
        Ok(())
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
