mod commands;
mod config;
mod error;
mod waveform;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Sweep;
use crate::config::LoadedConfig;
use crate::error::{CliError, CliResult};

/// Response-aware GRAPE pulse design for a single spin-1/2.
#[derive(Debug, Parser)]
#[command(name = "rawgrape", version)]
struct Cli {
    /// Worker threads for ensemble evaluation (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides [output].directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Optimize a waveform and write it with its infidelity trace and
    /// per-member fidelities.
    Optimize {
        #[command(flatten)]
        common: Common,
        /// Starting waveform instead of a random initial guess.
        #[arg(long)]
        waveform: Option<PathBuf>,
        /// Overrides [optimizer].seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a waveform over the configured ensemble, optionally swept
    /// over one or two parameters.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        waveform: PathBuf,
        /// param=lo:hi:n with param one of offset (ppm), power, q, sat (Hz).
        #[arg(long, value_parser = parse_sweep)]
        sweep: Vec<Sweep>,
    },
    /// Push a waveform through the first cascade row.
    Distort {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        waveform: PathBuf,
    },
    /// Compare the analytic gradient with central differences on a
    /// down-sized copy of the problem.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt_jacobian: bool,
    },
}

fn parse_sweep(s: &str) -> Result<Sweep, String> {
    s.parse().map_err(|e: CliError| e.to_string())
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::Input("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Input(format!("cannot configure worker pool: {e}")))?;
    }
    match cli.command {
        Command::Optimize { common, waveform, seed } => {
            let cfg = LoadedConfig::load(&common.config)?;
            let out = commands::output_dir(&cfg, common.out_dir.as_deref())?;
            commands::optimize(&cfg, waveform.as_deref(), seed, &out)
        }
        Command::Evaluate { common, waveform, sweep } => {
            let cfg = LoadedConfig::load(&common.config)?;
            let out = commands::output_dir(&cfg, common.out_dir.as_deref())?;
            commands::evaluate(&cfg, &waveform, &sweep, &out)
        }
        Command::Distort { common, waveform } => {
            let cfg = LoadedConfig::load(&common.config)?;
            let out = commands::output_dir(&cfg, common.out_dir.as_deref())?;
            commands::distort(&cfg, &waveform, &out)
        }
        Command::Gradcheck { common, seed, corrupt_jacobian } => {
            let cfg = LoadedConfig::load(&common.config)?;
            commands::gradcheck(&cfg, seed, corrupt_jacobian)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
