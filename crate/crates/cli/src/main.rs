//! `relcap`: reproducible composed-retrieval experiments from the command line.

mod commands;
mod config;
mod output;
mod sources;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use relcap::{Error, ErrorClass, Result};

use crate::config::ExperimentConfig;

#[derive(Parser, Debug)]
#[command(name = "relcap", version, about = "Composed image retrieval experiments")]
struct Cli {
    /// Experiment config (JSON). Flags override its fields.
    #[arg(long, global = true, env = "RELCAP_CONFIG")]
    config: Option<PathBuf>,
    /// Seed for every random stream; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to the number of cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic attribute world, encoder and feature stores.
    Synth(commands::synth::SynthArgs),
    /// Sample weakly supervised training examples or evaluation queries.
    GenCaptions(commands::captions::CaptionArgs),
    /// Train a fusion model.
    Train(commands::train::TrainArgs),
    /// Export catalog (and query) embeddings.
    Embed(commands::embed::EmbedArgs),
    /// Top-k catalog items per query.
    Retrieve(commands::retrieve::RetrieveArgs),
    /// Compute a metric suite.
    Eval(commands::eval::EvalArgs),
    /// Alignment and single-modality ablations.
    Ablate(commands::ablate::AblateArgs),
    /// Collect metrics from several runs into one CSV table.
    Report(commands::report::ReportArgs),
}

pub struct Context {
    pub config: ExperimentConfig,
    pub force: bool,
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let ctx = Context {
        config: config.resolve(cli.seed)?,
        force: cli.force,
    };
    match cli.command {
        Command::Synth(a) => commands::synth::run(&ctx, a),
        Command::GenCaptions(a) => commands::captions::run(&ctx, a),
        Command::Train(a) => commands::train::run(&ctx, a),
        Command::Embed(a) => commands::embed::run(&ctx, a),
        Command::Retrieve(a) => commands::retrieve::run(&ctx, a),
        Command::Eval(a) => commands::eval::run(&ctx, a),
        Command::Ablate(a) => commands::ablate::run(&ctx, a),
        Command::Report(a) => commands::report::run(&ctx, a),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
