use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use distill_lab_cli::config::{ConfigError, ExperimentConfig, RunMode};
use distill_lab_cli::run::{self, CliError, Fault};

/// Self-distillation laboratory: linear theory, toy masked auto-encoders and
/// invariant verification.
#[derive(Debug, Parser)]
#[command(name = "distill-lab", version)]
struct Cli {
    /// One of theory, mae, ablate, lowres, verify.
    mode: RunMode,
    /// `key = value` configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out` in the file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds; override `seeds` in the file.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Number of distillation rounds T′; overrides `rounds` in the file.
    #[arg(long)]
    rounds: Option<usize>,
    /// Harness self-test: closed-form, flow or gradient.
    #[arg(long)]
    inject_fault: Option<Fault>,
}

fn load(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::from_file(&cli.config)?;
    if let Some(mode) = cfg.mode {
        if mode != cli.mode {
            return Err(CliError::Usage(format!(
                "config file sets mode `{}` but `{}` was requested",
                mode.name(),
                cli.mode.name()
            )));
        }
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(seeds) = &cli.seeds {
        cfg.seeds = seeds.clone();
    }
    if let Some(rounds) = cli.rounds {
        cfg.rounds = rounds;
    }
    cfg.validate()
        .map_err(|e: ConfigError| CliError::Config(e))?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = load(&cli)
        .and_then(|cfg| run::run(cli.mode, &cfg, cli.inject_fault, &mut std::io::stderr()));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
