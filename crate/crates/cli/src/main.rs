use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use wf_cli::{execute, read_config, rerun, CliError, Command, Overrides, MANIFEST_FILE};

#[derive(Parser)]
#[command(name = "wf", version, about = "Wright-Fisher / replicator experiments")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, default_value = "wf-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Sub {
    /// Equilibrium, Jacobian, spectral radius and structural checks.
    Meanfield(Common),
    /// One trajectory of the chain.
    Simulate(Common),
    /// Ensemble of stopped or absorbed chains.
    Extinction(Common),
    /// Quasi-stationary distribution of a small chain.
    Qsd(Common),
    /// Decoupling-time probabilities against the Hoeffding bound.
    Bounds(Common),
    /// Re-run from a manifest and compare checksums.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, default_value = "wf-rerun")]
        out: PathBuf,
    },
}

fn run_common(command: Command, c: Common) -> Result<(), CliError> {
    let config = read_config(&c.config)?;
    let overrides = Overrides {
        seed: c.seed,
        replicates: c.replicates,
    };
    let (out, _) = execute(command, config, &overrides, c.threads, &c.out)?;
    println!("{}", out.headline);
    println!("outputs and {MANIFEST_FILE} written to {}", c.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Sub::Meanfield(c) => run_common(Command::Meanfield, c),
        Sub::Simulate(c) => run_common(Command::Simulate, c),
        Sub::Extinction(c) => run_common(Command::Extinction, c),
        Sub::Qsd(c) => run_common(Command::Qsd, c),
        Sub::Bounds(c) => run_common(Command::Bounds, c),
        Sub::Rerun { manifest, threads, out } => rerun(&manifest, threads, &out).and_then(|bad| {
            if bad.is_empty() {
                println!("all outputs reproduced byte for byte in {}", out.display());
                Ok(())
            } else {
                Err(CliError::Run(format!("outputs differ from the manifest: {}", bad.join(", "))))
            }
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
