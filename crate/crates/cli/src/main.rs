use std::path::PathBuf;
use std::process::ExitCode;

use ambs_cli::commands;
use ambs_cli::config::{load_run_config, read_json, seed_override, to_json, FitRunConfig, SEED_ENV};
use ambs_cli::CliError;
use ambs_core::diffcore::Mutation;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "ambs", version, about = "Adaptive bisimulation representation learning: training, evaluation and verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    /// Flip the sign of the |x| backward rule.
    FlipAbsGrad,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent; writes metrics, evaluations and checkpoints to the config's out_dir.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on the held-out background split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Verify the bisimulation fixed point and the value/discount bounds on random tabular MDPs.
    OracleCheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compare every loss's gradient with central finite differences.
    Gradcheck {
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2])]
        seeds: Vec<u64>,
        /// Deliberately break a backward rule (the check must then fail).
        #[arg(long, value_enum)]
        inject_fault: Option<Fault>,
    },
    /// Fit the meta-learner and L1-distance similarity forms to exact bisimulation targets.
    FitOracle {
        #[arg(long)]
        config: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let seed = seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
    match cli.command {
        Command::Train { config } => {
            let config = load_run_config(&config, seed)?;
            let summary = commands::train(&config)?;
            print!("{}", to_json(&summary)?);
        }
        Command::Eval { checkpoint, episodes, seed: s } => {
            let stats = commands::eval(&checkpoint, episodes, seed.unwrap_or(s))?;
            print!("{}", to_json(&stats)?);
        }
        Command::OracleCheck { instances, seed: s, report } => {
            let result = commands::oracle_check(instances, seed.unwrap_or(s))?;
            let json = to_json(&result)?;
            if let Some(path) = report {
                std::fs::write(path, &json)?;
            }
            if !result.passed {
                print!("{json}");
                let kinds: Vec<String> = result.violations.iter().map(|v| format!("instance {} {}: {}", v.index, v.kind, v.detail)).collect();
                return Err(CliError::Verification(kinds.join("; ")));
            }
            println!(
                "oracle-check passed: {} instances (+1 single-state), max value-bound slack violation {:.3e}, max discount-bound violation {:.3e}, absorbing gap {:.1e}",
                result.instances, result.max_value_violation, result.max_discount_violation, result.absorbing_gap
            );
        }
        Command::Gradcheck { seeds, inject_fault } => {
            let fault = inject_fault.map(|Fault::FlipAbsGrad| Mutation::FlipAbsGrad);
            let report = commands::gradcheck(&seeds, fault)?;
            print!("{}", to_json(&report)?);
            if !report.passed {
                return Err(CliError::Verification(report.failures().join("; ")));
            }
        }
        Command::FitOracle { config } => {
            let mut config: FitRunConfig = read_json(&config)?;
            if let Some(s) = seed {
                config.seeds = vec![s];
            }
            let report = commands::fit_oracle(&config)?;
            print!("{}", to_json(&report)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
