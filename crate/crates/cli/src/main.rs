use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use masseg_cli::compare::cmd_compare;
use masseg_cli::run::{cmd_metrics, cmd_run, RunOverrides, OUTPUT_ROOT_ENV};
use masseg_cli::CliError;
use masseg_core::regularization::StrategyKind;

#[derive(Parser)]
#[command(
    name = "masseg",
    version,
    about = "Importance-driven continual learning for segmentation"
)]
struct Cli {
    /// Suppress progress output on standard error.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every replicate of an experiment config and write its artifacts.
    Run {
        config: PathBuf,
        /// Base training seed; replicate k uses seed + k.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: $MASSEG_OUTPUT_ROOT/<strategy>, or runs/<strategy>).
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Strategy override, e.g. fine_tune, joint, mas, mas_lr, mas_fix.
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<StrategyKind>,
    },
    /// Print the continual-learning metrics of a train-test matrix CSV.
    Metrics { matrix: PathBuf },
    /// Tabulate mean ± std metrics of two or more run manifests.
    Compare {
        manifests: Vec<PathBuf>,
        /// Print CSV instead of the aligned table.
        #[arg(long)]
        csv: bool,
        /// Also write comparison.csv and comparison.txt here.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

fn parse_strategy(s: &str) -> Result<StrategyKind, String> {
    s.parse().map_err(|e: masseg_core::Error| e.to_string())
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            seed,
            output_dir,
            strategy,
        } => {
            let overrides = RunOverrides {
                seed,
                output_dir,
                strategy,
                output_root: std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from),
                quiet: cli.quiet,
            };
            let summary = cmd_run(&config, &overrides)?;
            println!("{}", summary.manifest_path.display());
        }
        Command::Metrics { matrix } => print!("{}", cmd_metrics(&matrix)?),
        Command::Compare {
            manifests,
            csv,
            output_dir,
        } => {
            let table = cmd_compare(&manifests)?;
            if let Some(dir) = output_dir {
                let io = |e: std::io::Error| CliError::io(format!("{}: {e}", dir.display()));
                std::fs::create_dir_all(&dir).map_err(io)?;
                std::fs::write(dir.join("comparison.csv"), table.to_csv()).map_err(io)?;
                std::fs::write(dir.join("comparison.txt"), table.to_text()).map_err(io)?;
            }
            print!("{}", if csv { table.to_csv() } else { table.to_text() });
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let first = e.to_string();
            let line = first
                .lines()
                .next()
                .unwrap_or("bad arguments")
                .trim_start_matches("error: ");
            eprintln!("{}", CliError::invalid(format!("arguments: {line}")));
            return ExitCode::from(2);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
