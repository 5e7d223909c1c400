use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rebel::harness::{self, ExperimentConfig, VerifyOptions};

/// Relative-reward regression policy optimization on contextual bandits.
#[derive(Parser)]
#[command(name = "rebel", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configured algorithm and write its artifacts.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace the config's algorithm with this one at default settings.
        #[arg(long)]
        algo: Option<String>,
    },
    /// Run several configs on a matched budget and tabulate them.
    Compare {
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One run per value of a parameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// `seed`, `iterations`, `batch_size`, `gamma`, or any `[algo]` key.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        algo: Option<String>,
    },
    /// Run the numerical verification battery.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print one JSON line per check.
        #[arg(long, short)]
        verbose: bool,
    },
}

fn load(path: &Path, seed: Option<u64>, algo: Option<&str>) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(algo) = algo {
        config.override_algo(algo)?;
    }
    Ok(config)
}

fn out_dir(flag: Option<PathBuf>, config: &ExperimentConfig, fallback: &str) -> PathBuf {
    flag.or_else(|| config.out.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(fallback))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            algo,
        } => {
            let config = load(&config, seed, algo.as_deref())?;
            let out = out_dir(out, &config, config.algo.name());
            let result = harness::train(&config, &out)
                .with_context(|| format!("training (metrics so far in {})", out.display()))?;
            println!("{}", result.summary.to_json_pretty());
            eprintln!("artifacts written to {}", out.display());
        }
        Command::Compare { configs, seed, out } => {
            let configs = configs
                .iter()
                .map(|p| load(p, seed, None))
                .collect::<Result<Vec<_>>>()?;
            let table = harness::compare(&configs, out.as_deref())?;
            print!("{}", table.to_text());
        }
        Command::Sweep {
            config,
            param,
            values,
            seed,
            out,
            algo,
        } => {
            let config = load(&config, seed, algo.as_deref())?;
            let values: Vec<_> = values
                .iter()
                .map(|v| v.trim())
                .filter(|v| !v.is_empty())
                .map(harness::parse_value)
                .collect();
            if values.is_empty() {
                bail!("sweep needs at least one value (--values a,b,...)");
            }
            let report = harness::sweep(&config, &param, &values, out.as_deref())?;
            print!("{}", report.to_text());
        }
        Command::Verify { seed, verbose } => {
            let options = VerifyOptions {
                seed,
                ..VerifyOptions::default()
            };
            let results = harness::verify_battery(&options)?;
            for r in &results {
                if verbose {
                    println!("{}", r.to_json_line());
                } else {
                    println!("{} {}", if r.passed { "PASS" } else { "FAIL" }, r.name);
                }
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            eprintln!("{} checks, {failed} failed", results.len());
            return Ok(ExitCode::from(harness::exit_code(&results) as u8));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
