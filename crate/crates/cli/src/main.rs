//! `hierrec`: simulate, train, infer, push, recommend, evaluate, segments.
//!
//! Exit status: 0 success, 2 configuration or parse error, 3 data error,
//! 4 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hierrec::models::ModelRegistry;
use hierrec::{Error, ErrorClass};

use config::{parse_overrides, RunConfig};

#[derive(Parser)]
#[command(name = "hierrec", version, about = "Hierarchical user-interaction model pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON run config; every key can also be set with `--key value`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config overrides, e.g. `--threads 4 --model M-view`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic dataset from a simulation spec into `data_dir`.
    Simulate(Common),
    /// Train `model` with EM and save it to the model store.
    Train(Common),
    /// Infer fields from the last `window_days` of events.
    Infer(Common),
    /// Push inferred fields to the user fields store.
    Push(Common),
    /// Recommend `k` jobs for `user`.
    Recommend(Common),
    /// Compare `models` over the evaluation windows.
    Evaluate(Common),
    /// Segment users by activity over the recent window.
    Segments(Common),
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numerical => 4,
    }
}

fn run(cli: Cli) -> hierrec::Result<()> {
    let common = match &cli.command {
        Command::Simulate(c)
        | Command::Train(c)
        | Command::Infer(c)
        | Command::Push(c)
        | Command::Recommend(c)
        | Command::Evaluate(c)
        | Command::Segments(c) => c,
    };
    let cfg = RunConfig::resolve(common.config.as_deref(), &parse_overrides(&common.overrides)?)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let registry = ModelRegistry::with_defaults();
    match cli.command {
        Command::Simulate(_) => commands::simulate(&cfg),
        Command::Train(_) => commands::train(&cfg, &registry),
        Command::Infer(_) => commands::infer(&cfg, &registry),
        Command::Push(_) => commands::push(&cfg, &registry),
        Command::Recommend(_) => commands::recommend(&cfg, &registry),
        Command::Evaluate(_) => commands::evaluate(&cfg, &registry),
        Command::Segments(_) => commands::segments(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
