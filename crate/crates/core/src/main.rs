use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use patchassoc::harness::{run_experiment, ExperimentConfig, Subcommand, VERSION};
use patchassoc::Error;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    GenerateData,
    Train,
    Idealized,
    Transfer,
    Sweep,
    Baseline,
    Spurious,
    Gradcheck,
}

impl From<Command> for Subcommand {
    fn from(c: Command) -> Self {
        match c {
            Command::GenerateData => Subcommand::GenerateData,
            Command::Train => Subcommand::Train,
            Command::Idealized => Subcommand::Idealized,
            Command::Transfer => Subcommand::Transfer,
            Command::Sweep => Subcommand::Sweep,
            Command::Baseline => Subcommand::Baseline,
            Command::Spurious => Subcommand::Spurious,
            Command::Gradcheck => Subcommand::Gradcheck,
        }
    }
}

/// Patch-association experiments for a one-layer positional-attention model.
#[derive(Debug, Parser)]
#[command(version, about)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Config file of `key = value` lines; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Exit with status 4 when an acceptance gate fails.
    #[arg(long = "assert")]
    assert_gates: bool,
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_overrides(cli.overrides.iter().map(String::as_str))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = resolve(&cli).and_then(|cfg| run_experiment(&cfg, cli.command.into()));
    match result {
        Ok(status) => {
            for gate in &status.failed_gates {
                eprintln!("gate failed: {gate}");
            }
            if cli.assert_gates && !status.passed() {
                ExitCode::from(4)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("{VERSION}: {e}");
            ExitCode::from(match e {
                Error::Config { .. } => 2,
                Error::Divergence { .. } => 3,
                _ => 1,
            })
        }
    }
}
