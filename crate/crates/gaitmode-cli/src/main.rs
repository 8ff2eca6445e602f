//! `gaitmode` — walking-mode estimation toolbox.
//!
//! One binary covers the full experimental loop: synthetic cohort
//! generation, training of the convolutional estimator and the forest
//! baseline, leave-one-user-out comparison, per-offset AUROC curves,
//! the three-day self-labeling adaptation protocol, and a closed-loop
//! controller simulation. Commands share one TOML configuration file;
//! every output file is stamped with the tool version, a hash of the
//! effective configuration, and the seed, and is bit-identical across
//! runs of the same (config, seed).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;

/// Environment variable capping the worker thread count.
const THREADS_ENV: &str = "GAITMODE_THREADS";

#[derive(Parser)]
#[command(name = "gaitmode", version, about = "Walking-mode estimation toolbox")]
struct Cli {
    /// TOML run configuration; missing file fields use defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configuration's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory receiving output files.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cohort CSVs plus a checksum manifest.
    GenData,
    /// Train the convolutional estimator; writes checkpoint and report.
    Train,
    /// Train the random-forest baseline; writes forest and report.
    TrainRf,
    /// Leave-one-user-out comparison of both models.
    Crossval,
    /// Per-offset AUROC curve on a held-out user, with baselines.
    WindowCurve,
    /// Three-day adaptation protocol in both labeling modes.
    Ssl,
    /// Closed-loop controller simulation over one sequence.
    Simulate,
}

fn load_config(cli: &Cli) -> gaitmode::Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                gaitmode::Error::Invalid(format!("cannot read config {}: {e}", path.display()))
            })?;
            RunConfig::from_toml(&text).map_err(|e| {
                gaitmode::Error::Invalid(format!("bad config {}: {e}", path.display()))
            })?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn init_thread_pool() {
    if let Ok(value) = std::env::var(THREADS_ENV) {
        match value.parse::<usize>() {
            Ok(n) if n > 0 => {
                // ignore failure: the pool may already be initialized
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => eprintln!("warning: ignoring {THREADS_ENV}={value:?} (want a positive integer)"),
        }
    }
}

fn run() -> gaitmode::Result<()> {
    let cli = Cli::parse();
    init_thread_pool();
    let config = load_config(&cli)?;
    match cli.command {
        Command::GenData => commands::cmd_gen_data(&config, &cli.out),
        Command::Train => commands::cmd_train(&config, &cli.out),
        Command::TrainRf => commands::cmd_train_rf(&config, &cli.out),
        Command::Crossval => commands::cmd_crossval(&config, &cli.out),
        Command::WindowCurve => commands::cmd_window_curve(&config, &cli.out),
        Command::Ssl => commands::cmd_ssl(&config, &cli.out),
        Command::Simulate => commands::cmd_simulate(&config, &cli.out),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
