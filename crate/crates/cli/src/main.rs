//! `vimag`: forge datasets, train adapters, evaluate, manage retrieval
//! indexes, and run analyses.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data or provider error,
//! 4 numerical failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vimag_core::config::Config;
use vimag_core::Error;

#[derive(Parser, Debug)]
#[command(name = "vimag", version, about = "Answer scoring with imagined images")]
struct Cli {
    /// TOML config; unset keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training and forging seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a QA dataset from triples, VCR-style, and Sherlock-style records.
    Forge(commands::ForgeArgs),
    /// Train adapters and write the best-epoch checkpoint.
    Train(commands::TrainArgs),
    /// Score an evaluation set and report accuracy.
    Eval(commands::EvalArgs),
    #[command(subcommand)]
    Index(IndexCommand),
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
}

#[derive(Subcommand, Debug)]
enum IndexCommand {
    /// Validate image embeddings and write a retrieval index.
    Build(commands::IndexBuildArgs),
    /// Top-k images for a question or a raw vector.
    Query(commands::IndexQueryArgs),
}

#[derive(Subcommand, Debug)]
enum AnalyzeCommand {
    /// Mean `100·max(0, cos)` over text/image embedding pairs.
    Relevance(commands::RelevanceArgs),
    /// Helpful and harmful prediction flips in a prediction log.
    Impact(commands::ImpactArgs),
    /// Erase the lowest-attention patches of each image.
    Mask(commands::MaskArgs),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(mut e) = err.downcast_ref::<Error>() else { return 3 };
    while let Error::Stage { source, .. } = e {
        e = source;
    }
    match e {
        Error::InvalidConfig(_) | Error::UnconfiguredStrategy(_) | Error::NoObjective => 2,
        Error::NumericalFailure { .. } => 4,
        _ => 3,
    }
}

/// The cause chain, skipping causes already spelled out by their parent.
fn message(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let s = cause.to_string();
        if !msg.ends_with(&s) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&s);
        }
    }
    msg
}

fn load_config(cli: &Cli) -> anyhow::Result<Config> {
    let cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(Error::InvalidConfig("--jobs must be positive".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Forge(a) => commands::forge(&cfg, &a),
        Command::Train(a) => commands::train(cfg, &a),
        Command::Eval(a) => commands::eval(cfg, &a),
        Command::Index(IndexCommand::Build(a)) => commands::index_build(&a),
        Command::Index(IndexCommand::Query(a)) => commands::index_query(&a),
        Command::Analyze(AnalyzeCommand::Relevance(a)) => commands::relevance(&a),
        Command::Analyze(AnalyzeCommand::Impact(a)) => commands::impact(&a),
        Command::Analyze(AnalyzeCommand::Mask(a)) => commands::mask(&cfg, &a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", message(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
