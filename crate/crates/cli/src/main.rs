use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lipsde_core::experiment::{
    run_implication_suite, run_tracked_training, schema, write_run, ErrorCategory,
    ExperimentConfig, ExperimentError, SuiteKind,
};
use lipsde_core::oracle::run_oracle_checks;

#[derive(Parser)]
#[command(name = "lipsde", version = lipsde_core::experiment::VERSION, about = "Track the SDE of a network's Lipschitz bound during SGD")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML config file; unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set eta=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Single tracked training run.
    Track(RunArgs),
    /// Run one implication suite over its grid.
    Suite {
        /// init_law, near_convergence, grad_noise, label_noise, batch_size or sampling_trajectory.
        name: String,
        #[command(flatten)]
        args: RunArgs,
    },
    /// Cross-check derivative and noise computations against dense oracles.
    CheckOracles {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Print the output and config schema as JSON.
    EmitSchema,
}

fn load(
    args: &RunArgs,
    base: ExperimentConfig,
) -> Result<(ExperimentConfig, PathBuf), ExperimentError> {
    let cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => base,
    }
    .with_overrides(&args.overrides)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    Ok((cfg, out))
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json"));
}

fn run(cli: Cli) -> Result<ExitCode, ExperimentError> {
    match cli.command {
        Command::Track(args) => {
            let (cfg, out) = load(&args, ExperimentConfig::default())?;
            let run = run_tracked_training(&cfg)?;
            write_run(&out, &cfg, &run)?;
            print_json(&lipsde_core::experiment::manifest(&cfg, &run));
            Ok(ExitCode::SUCCESS)
        }
        Command::Suite { name, args } => {
            let which: SuiteKind = name.parse()?;
            let (cfg, out) = load(&args, which.default_config())?;
            let summary = run_implication_suite(which, &cfg, Some(&out))?;
            print_json(&serde_json::to_value(&summary).expect("json"));
            Ok(ExitCode::SUCCESS)
        }
        Command::CheckOracles { seed } => {
            let checks = run_oracle_checks(seed)?;
            let mut ok = true;
            for c in &checks {
                ok &= c.passed;
                println!(
                    "{} {:<42} max_error={:.3e} tolerance={:.0e}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.max_error,
                    c.tolerance
                );
            }
            Ok(if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::EmitSchema => {
            print_json(&schema());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn exit_code(err: &ExperimentError) -> u8 {
    match err.category() {
        ErrorCategory::Config => 2,
        ErrorCategory::Io => 3,
        ErrorCategory::Numerical => 4,
        ErrorCategory::Data => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
