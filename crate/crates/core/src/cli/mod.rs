//! Command-line front end.
//!
//! Every subcommand reads and writes artifacts under one workspace
//! directory. Settings come from built-in defaults, then an optional flat
//! `key = value` file, then `--set key=value` and subcommand flags; the
//! effective settings are echoed before the subcommand runs.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub use commands::Workspace;
pub use config::{Config, DEFAULTS};

use crate::error::{Error, Result};
use crate::lifecycle::parse_day;

#[derive(Debug, Parser)]
#[command(name = "mmsearch", version, about = "Multimodal item embeddings and dual-recall image search")]
struct Cli {
    /// Directory holding every artifact.
    #[arg(long, global = true, default_value = "workspace")]
    workspace: PathBuf,
    /// Flat key = value settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override one setting; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic catalog and click logs.
    GenData {
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        items: Option<usize>,
    },
    /// Train one curriculum stage, or all three in order.
    Train {
        #[arg(value_enum)]
        stage: StageArg,
    },
    /// Embed the catalog into the I2I and MIEM index snapshots.
    BuildIndex,
    /// Simulate the next catalog day and update both indexes.
    DailyJob {
        /// Day to run, YYYY-MM-DD; defaults to the day after the newest.
        #[arg(long)]
        day: Option<String>,
        /// Fraction of the catalog removed, edited and added.
        #[arg(long)]
        churn: Option<f64>,
    },
    /// Start the HTTP search service.
    Serve {
        #[arg(long)]
        addr: Option<String>,
    },
    /// Offline comparison of I2I, MIEM and their fusion.
    Eval,
    /// Check loss gradients against central differences.
    Gradcheck {
        /// Consecutive seeds to check, starting at `--seed`.
        #[arg(long, default_value_t = 1)]
        rounds: u64,
    },
}

fn effective_config(cli: &Cli) -> Result<Config> {
    let mut cfg = Config::default();
    if let Some(path) = &cli.config {
        cfg.merge_file(path)?;
    }
    for pair in &cli.overrides {
        cfg.set_pair(pair)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    match &cli.command {
        Command::GenData { classes, items } => {
            if let Some(c) = classes {
                cfg.set("classes", &c.to_string())?;
            }
            if let Some(i) = items {
                cfg.set("items", &i.to_string())?;
            }
        }
        Command::DailyJob { churn: Some(c), .. } => cfg.set("churn", &c.to_string())?,
        Command::Serve { addr: Some(a) } => cfg.set("addr", a)?,
        _ => {}
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    println!("# workspace = {}", cli.workspace.display());
    print!("{}", cfg.echo());
    let ws = Workspace::new(&cli.workspace);
    match &cli.command {
        Command::GenData { .. } => commands::gen_data(&ws, &cfg).map(|_| ()),
        Command::Train { stage } => {
            let stages: &[u8] = match stage {
                StageArg::One => &[1],
                StageArg::Two => &[2],
                StageArg::Three => &[3],
                StageArg::All => &[1, 2, 3],
            };
            commands::train(&ws, &cfg, stages)
        }
        Command::BuildIndex => commands::build_indexes(&ws, &cfg),
        Command::DailyJob { day, .. } => {
            let day = day
                .as_deref()
                .map(|d| parse_day(d).map_err(|e| Error::Usage(e.to_string())))
                .transpose()?;
            commands::daily(&ws, &cfg, day)
        }
        Command::Serve { .. } => commands::serve_http(&ws, &cfg, cfg.raw("addr")),
        Command::Eval => commands::eval(&ws, &cfg),
        Command::Gradcheck { rounds } => commands::gradcheck(cfg.get("seed")?, *rounds),
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// exit code: 0 on success, 1 on a usage error, 2 on a runtime failure.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(Error::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun `mmsearch --help` for usage.");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

#[cfg(test)]
mod tests;
