mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use clrsel_core::selection::Method;
use clrsel_core::{Error, ErrorKind};

use commands::{Ctx, Dataset};
use config::{Overrides, RunConfig};
use output::WorkdirLock;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_BUSY: u8 = 5;

#[derive(Parser)]
#[command(name = "clrsel", version, about = "Contrastive-loss-ratio data selection")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(short, long, global = true, default_value = "clrsel.toml")]
    config: PathBuf,
    /// Overrides the config file and CLRSEL_WORKDIR.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Replace every named seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Replace outputs even when their content differs.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic target and pool corpora.
    Synth,
    /// Train a CPC model on the target set or the pool.
    Train {
        #[arg(long, value_enum)]
        dataset: Dataset,
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Score every pool utterance by contrastive loss ratio.
    Score {
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Greedy selection under a budget (`2h`, `900s`, `25%`, `0.25`, `120`).
    Select {
        #[arg(long)]
        budget: String,
        #[arg(long, default_value = "clr", value_parser = parse_method)]
        method: Method,
    },
    /// Negative-transfer filtering over a grid of retained fractions.
    Filter {
        #[arg(long, default_value = "clr", value_parser = parse_method)]
        method: Method,
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
    },
    /// Fit the GMM log-likelihood baseline and select with it.
    Baseline,
    /// Per-domain composition of two methods' selections.
    Report {
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<String>>,
        #[arg(long, default_value = "clr", value_parser = parse_method)]
        first: Method,
        #[arg(long, default_value = "ll", value_parser = parse_method)]
        second: Method,
    },
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => EXIT_CONFIG,
        ErrorKind::Data => EXIT_DATA,
        ErrorKind::Numeric => EXIT_NUMERIC,
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let mut overrides = Overrides {
        workdir: cli.workdir,
        seed: cli.seed,
        ..Overrides::default()
    };
    match &cli.command {
        Command::Train { max_epochs, .. } => overrides.max_epochs = *max_epochs,
        Command::Score { alpha } => overrides.alpha = *alpha,
        _ => {}
    }
    let config = RunConfig::load(&cli.config, &overrides)?;
    let _lock = match WorkdirLock::acquire(&config.workdir)? {
        Ok(lock) => lock,
        Err(busy) => {
            eprintln!(
                "error: workdir is locked by another clrsel command ({}); remove it if no command is running",
                busy.0.display()
            );
            return Ok(ExitCode::from(EXIT_BUSY));
        }
    };
    let ctx = Ctx::new(config, cli.force);
    log::info!("config hash {}", ctx.hash);
    let written = match cli.command {
        Command::Synth => commands::synth(&ctx)?,
        Command::Train { dataset, .. } => commands::train_cmd(&ctx, dataset)?,
        Command::Score { .. } => commands::score(&ctx)?,
        Command::Select { budget, method } => commands::select(&ctx, &budget, method)?,
        Command::Filter { method, fractions } => commands::filter(&ctx, method, fractions)?,
        Command::Baseline => commands::baseline(&ctx)?,
        Command::Report { budgets, first, second } => commands::report(&ctx, budgets, (first, second))?,
    };
    log::info!("{} file(s) written", written.len());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
