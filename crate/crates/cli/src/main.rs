//! Command-line front end.
//!
//! Exit status: 0 on success, 1 when a verification or gradient check
//! fails, 2 for usage and I/O errors.

mod bench;
mod check;
mod heatmap;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use riemannformer::Mechanism;

#[derive(Parser)]
#[command(
    name = "riemannformer",
    version,
    about = "Tangent-space positional attention: checks, training and inspection"
)]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the randomized identity suite.
    Verify(check::VerifyArgs),
    /// Compare tape gradients of a micro model with central differences.
    Gradcheck(check::GradcheckArgs),
    /// Train a model and write metrics and checkpoints.
    Train(train::TrainArgs),
    /// Time one attention layer per mechanism at equal shapes.
    Bench(bench::BenchArgs),
    /// Write one attention matrix of a trained model as CSV or PGM.
    ExportHeatmap(heatmap::HeatmapArgs),
}

/// What a command found, when it ran to completion.
pub enum Verdict {
    Pass,
    Fail,
}

pub fn parse_mechanism(s: &str) -> Result<Mechanism, String> {
    s.parse::<Mechanism>().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Verify(a) => check::verify(&a, cli.seed),
        Command::Gradcheck(a) => check::gradcheck(&a, cli.seed),
        Command::Train(a) => train::run(&a, cli.seed),
        Command::Bench(a) => bench::run(&a, cli.seed),
        Command::ExportHeatmap(a) => heatmap::run(&a, cli.seed),
    };
    match result {
        Ok(Verdict::Pass) => ExitCode::SUCCESS,
        Ok(Verdict::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
