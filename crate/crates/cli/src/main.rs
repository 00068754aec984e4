//! `flexp` — run split-federated training experiments, sweeps, and the
//! built-in verification oracles from the command line.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime error,
//! 3 verification failure.

use clap::{Parser, Subcommand};
use flexp_core::config::{ExperimentConfig, CONFIG_REFERENCE};
use flexp_core::data::{export_csv, generate_federation};
use flexp_core::error::Error;
use flexp_core::runner::{run_experiment, sweep, sweep_csv, verify, SweepParam};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "flexp", version, about = "Flexible personalized split federated learning, desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write timeline/summary/crosseval CSVs.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed (first seed of the list by default).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Sweep one parameter over a list of values, averaged over seeds.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// One of: q, lambda, dropout.
        #[arg(long)]
        param: String,
        /// Comma-separated values, e.g. --values 0.1,0.2,0.5
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        /// Seeds to average over; defaults to the config's seed list.
        #[arg(long)]
        seed: Vec<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Worker threads.
        #[arg(long, default_value_t = 2)]
        jobs: usize,
    },
    /// Run the self-check oracle suite (gradients, split equivalence,
    /// wire round-trips, determinism).
    Verify,
    /// Generate the synthetic federation of a config and export it as CSV.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Print the fully documented configuration schema.
    PrintConfigReference,
}

fn exit_code_for(e: &Error) -> ExitCode {
    match e {
        Error::Config(_) | Error::Input(_) | Error::Dimension(_) => ExitCode::from(1),
        _ => ExitCode::from(2),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run_command(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn run_command(cmd: Command) -> Result<ExitCode, Error> {
    match cmd {
        Command::Run { config, seed, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let summary = run_experiment(&cfg, seed, &out)?;
            println!(
                "seed {seed}: personalized {:.4}, global {:.4}, sim time {:.2}s, {} bytes",
                summary.mean_personalized_acc,
                summary.mean_global_acc,
                summary.total_sim_time_s,
                summary.total_bytes
            );
            println!("wrote {}", out.join("timeline.csv").display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { config, param, values, seed, out, jobs } => {
            let cfg = ExperimentConfig::load(&config)?;
            let param: SweepParam = param.parse()?;
            if values.is_empty() {
                return Err(Error::Config("--values must list at least one value".into()));
            }
            let seeds = if seed.is_empty() { cfg.seeds.clone() } else { seed };
            let rows = sweep(&cfg, param, &values, &seeds, jobs)?;
            let csv = sweep_csv(param, &rows);
            std::fs::create_dir_all(&out)?;
            let path = out.join("sweep.csv");
            std::fs::write(&path, &csv)?;
            print!("{csv}");
            println!("wrote {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify => {
            let report = verify();
            for c in &report.checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if report.all_passed() {
                println!("all checks passed");
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(3))
            }
        }
        Command::GenData { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let fed = generate_federation(&cfg.federation)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("federation.csv");
            let mut file = std::fs::File::create(&path)?;
            export_csv(&fed, &mut file)?;
            println!("wrote {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::PrintConfigReference => {
            print!("{CONFIG_REFERENCE}");
            Ok(ExitCode::SUCCESS)
        }
    }
}
