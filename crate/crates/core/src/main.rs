use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vflab::attack::Variant;
use vflab::harness::{load_config, run_experiment, ResultsRecord};

#[derive(Parser)]
#[command(name = "vflab", version, about = "Run inference-attack experiments against a detector-guarded VFL system")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment and write the results file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run a single seed instead of the configured list.
        #[arg(long)]
        seed_override: Option<u64>,
        /// Attack variant, overriding `attack.variant`.
        #[arg(long)]
        variant: Option<Variant>,
        /// Results path; defaults to `experiment.output` or `results.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a results file as a table.
    Inspect {
        #[arg(long)]
        results: PathBuf,
    },
    /// Print the effective config with every default filled in.
    Config {
        #[arg(long)]
        config: PathBuf,
    },
}

fn run(cli: Cli) -> vflab::Result<()> {
    match cli.command {
        Command::Run {
            config,
            seed_override,
            variant,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed_override {
                cfg.seeds = vec![s];
            }
            if let Some(v) = variant {
                cfg.variant = v;
            }
            let out = out.or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("results.csv"));
            let record = run_experiment(&cfg)?;
            std::fs::write(&out, record.to_csv())?;
            print!("{}", record.pretty());
            println!("results written to {}", out.display());
        }
        Command::Inspect { results } => {
            let record = ResultsRecord::from_csv(&std::fs::read_to_string(results)?)?;
            print!("{}", record.pretty());
        }
        Command::Config { config } => print!("{}", load_config(config)?.render()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
