//! `geosketch` command-line front end.

use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use config::ConfigArgs;

#[derive(Parser, Debug)]
#[command(name = "geosketch", version, about = "Per-term spatial summaries over geotagged event streams")]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Builds per-term summaries from an event file and writes a snapshot.
    Ingest(commands::IngestArgs),
    /// Most frequent stored cells of a term.
    Rfs(commands::RfsArgs),
    /// Expected frequency of a term at a location.
    Tfs(commands::TfsArgs),
    /// Multi-term ranking or frequency estimate.
    Multi(commands::MultiArgs),
    /// Fits location models for snapshot terms.
    Fit(commands::FitArgs),
    /// Writes a synthetic single-source event stream.
    Gen(commands::GenArgs),
    /// Accuracy evaluations against exact counts.
    #[command(subcommand)]
    Eval(commands::EvalCommand),
    /// Update and query timing, replacement curve and strategy accuracy.
    Bench(commands::BenchArgs),
    /// Rebuilds summary tables from completed eval and bench runs.
    Table(commands::TableArgs),
}

/// Failure classes, each with its own exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Data(_) => 4,
        }
    }
}

impl From<geosketch::Error> for CliError {
    fn from(e: geosketch::Error) -> Self {
        use geosketch::Error as E;
        match e {
            E::InvalidGrid(_) | E::InvalidSpec(_) | E::InvalidConfig(_) => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = config::CliConfig::resolve(&cli.config).and_then(|cfg| {
        let exec =
            if cli.config.sequential { geosketch::Execution::Sequential } else { geosketch::Execution::Parallel };
        let mut out = std::io::stdout().lock();
        match cli.command {
            Command::Ingest(a) => commands::ingest(&cfg, exec, &a, &mut out),
            Command::Rfs(a) => commands::rfs(&cfg, exec, &a, &mut out),
            Command::Tfs(a) => commands::tfs(&cfg, exec, &a, &mut out),
            Command::Multi(a) => commands::multi(&cfg, exec, &a, &mut out),
            Command::Fit(a) => commands::fit(&cfg, exec, &a, &mut out),
            Command::Gen(a) => commands::gen(&cfg, &a, &mut out),
            Command::Eval(c) => commands::eval(&cfg, exec, &c, &mut out),
            Command::Bench(a) => commands::bench(&cfg, exec, &a, &mut out),
            Command::Table(a) => commands::table(&a, &mut out),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
