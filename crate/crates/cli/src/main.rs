//! Batch experiment front end: split protocols, pretraining, full training,
//! evaluation, gradient checking, and synthetic corpus generation.
//!
//! Exit codes: 0 success, 2 usage/config error, 3 data/model error.

mod commands;

use clap::{Parser, Subcommand};
use s2pnm_core::Error;

#[derive(Parser)]
#[command(
    name = "s2pnm",
    version,
    about = "Sequential recommender with dictionary-decoded dynamic preferences"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a CSV corpus, filter it, split it, and write a reusable manifest.
    Split(commands::SplitArgs),
    /// Train the biased-MF baseline used for static pretraining.
    Pretrain(commands::PretrainArgs),
    /// Train the full sequence model from a split manifest.
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint on the test side of a split.
    Evaluate(commands::EvaluateArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(commands::GradcheckArgs),
    /// Generate a synthetic corpus with known ground truth.
    Synth(commands::SynthArgs),
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        _ => 3,
    }
}

fn main() {
    let cli = Cli::parse();
    init_thread_pool();
    let result = match cli.command {
        Command::Split(args) => commands::run_split(args),
        Command::Pretrain(args) => commands::run_pretrain(args),
        Command::Train(args) => commands::run_train(args),
        Command::Evaluate(args) => commands::run_evaluate(args),
        Command::Gradcheck(args) => commands::run_gradcheck(args),
        Command::Synth(args) => commands::run_synth(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}

/// S2PREF_THREADS caps internal parallelism; hardware count by default.
fn init_thread_pool() {
    if let Ok(threads) = std::env::var("S2PREF_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
        }
    }
}
