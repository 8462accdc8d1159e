use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fca_cli::summary::write_summary;
use fca_cli::{format_table, parse_config, run, summarize_dir, CliError, RunOptions};

#[derive(Parser)]
#[command(name = "fca", version, about = "Federated classifier anchoring experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (method, seed) cell of a config.
    Run {
        config: PathBuf,
        /// Output directory (overrides `output_dir` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of cells run concurrently.
        #[arg(long)]
        parallel: Option<usize>,
        /// Save federation state every R rounds.
        #[arg(long, value_name = "R")]
        checkpoint_every: Option<usize>,
    },
    /// Parse and check a config without running it.
    Validate { config: PathBuf },
    /// Rebuild summary.json and the table from a finished run directory.
    Summarize { out_dir: PathBuf },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            out,
            parallel,
            checkpoint_every,
        } => {
            let cfg = parse_config(&config)?;
            let summary = run(
                &cfg,
                &RunOptions {
                    out_dir: out,
                    parallel,
                    checkpoint_every,
                },
            )?;
            print!("{}", format_table(&summary));
        }
        Command::Validate { config } => {
            let cfg = parse_config(&config)?;
            println!(
                "ok: {} variant(s) x {} seed(s)",
                cfg.variants().len(),
                cfg.seeds.len()
            );
        }
        Command::Summarize { out_dir } => {
            let summary = summarize_dir(&out_dir)?;
            write_summary(&out_dir, &summary)?;
            print!("{}", format_table(&summary));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {}", s);
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
