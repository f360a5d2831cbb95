use clap::{Parser, Subcommand};
use serde::Serialize;

use fluxattn::commands::{
    cmd_compare, cmd_decode, cmd_fit, cmd_gen, cmd_label, cmd_train, CompareArgs, DecodeArgs, FitArgs, GenArgs,
    LabelArgs, TrainArgs,
};

/// Hybrid sparse-attention testbed: generate, label, fit, train, decode, compare.
#[derive(Parser)]
#[command(name = "fluxattn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic workload trace.
    Gen(GenArgs),
    /// Label every head and decode step of a trace with oracle budgets.
    Label(LabelArgs),
    /// Refit budget-vs-granularity lines and summarize them per archetype.
    Fit(FitArgs),
    /// Train the head-property predictor on a label file.
    Train(TrainArgs),
    /// Run one budgeting configuration over a trace and schedule it.
    Decode(DecodeArgs),
    /// Run the full comparison grid, scheduler ablation and threshold sweep.
    Compare(CompareArgs),
}

fn print<T: Serialize>(v: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a).and_then(|s| print(&s)),
        Command::Label(a) => cmd_label(a).and_then(|s| print(&s)),
        Command::Fit(a) => cmd_fit(a).and_then(|s| print(&s)),
        Command::Train(a) => cmd_train(a).and_then(|s| print(&s)),
        Command::Decode(a) => cmd_decode(a).and_then(|s| print(&s)),
        Command::Compare(a) => cmd_compare(a).and_then(|s| print(&s)),
    };
    match result {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
