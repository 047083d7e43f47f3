//! `covloc` command-line front end.
//!
//! Every command reads one resolved [`RunConfig`]: an optional TOML file plus
//! `--set section.key=value` overrides. Exit status is 0 on success, 1 for
//! usage or configuration errors, 2 for data errors, 3 for numeric failures.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "covloc", version, about = "LiDAR map-matching covariance pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.steps=200`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker thread cap. Outputs do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Monte-Carlo covariance labels for the configured frames.
    Generate,
    /// Fit the covariance regressor to a dataset.
    Train,
    /// Score model predictions against dataset labels.
    Eval,
    /// Run ICP-only, fixed-covariance and predicted-covariance fusion.
    Fuse,
    /// Write a synthetic sequence in KITTI layout.
    Synth,
}

pub fn execute(cli: &Cli, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let run = |out: &mut (dyn Write + Send)| match cli.command {
        Command::Generate => commands::cmd_generate(&cfg, out),
        Command::Train => commands::cmd_train(&cfg, out),
        Command::Eval => commands::cmd_eval(&cfg, out),
        Command::Fuse => commands::cmd_fuse(&cfg, out),
        Command::Synth => commands::cmd_synth(&cfg, out),
    };
    match cli.threads {
        Some(0) => Err(CliError::Usage("--threads must be positive".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?
            .install(|| run(out)),
        None => run(out),
    }
}

/// Parses `args` (program name first), runs the command, returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli, &mut std::io::stdout()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
