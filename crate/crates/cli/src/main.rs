use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rrtls::harness::Execution;

mod commands;
mod config;
mod matrix;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("parse: {0}")]
    Parse(String),
    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Estimator(#[from] rrtls::error::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Parse(_) | CliError::Io { .. } => 2,
            CliError::Estimator(_) => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "rrtls", version, about = "Reduced-rank LS/TLS estimators and Monte Carlo verification")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Worker threads: a positive count or `auto`.
    #[arg(long, global = true, default_value = "auto", value_parser = parse_threads)]
    threads: Threads,
    /// Run trials in order on one thread (bit-exact mode).
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate θ and x from matrix files named in the config.
    Estimate,
    /// Monte Carlo sweep over ranks for an experiment config.
    Sweep,
    /// Run the acceptance suite.
    Verify,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Threads {
    Auto,
    Count(usize),
}

fn parse_threads(s: &str) -> Result<Threads, String> {
    if s == "auto" {
        return Ok(Threads::Auto);
    }
    match s.parse::<usize>() {
        Ok(n) if n > 0 => Ok(Threads::Count(n)),
        _ => Err(format!("expected a positive integer or `auto`, got `{s}`")),
    }
}

impl Cli {
    fn execution(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }

    fn require_config(&self) -> Result<&Path, CliError> {
        self.config
            .as_deref()
            .ok_or_else(|| CliError::Parse("--config is required for this subcommand".into()))
    }

    pub fn emit(&self, text: &str) -> Result<(), CliError> {
        match &self.out {
            Some(path) => std::fs::write(path, text).map_err(|e| CliError::io(path, e)),
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode, CliError> {
    if let Threads::Count(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Parse(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Estimate => commands::estimate(cli, cli.require_config()?),
        Command::Sweep => commands::sweep(cli, cli.require_config()?),
        Command::Verify => commands::verify(cli),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
