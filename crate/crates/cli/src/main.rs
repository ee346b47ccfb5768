use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod ablate;
mod eval;
mod inspect;
mod run;
mod synth;
mod train;
mod verify;

/// Deep multi-order context-aware kernel networks on grid cell features.
#[derive(Debug, Parser)]
#[command(name = "dmckn", version, propagate_version = true)]
struct Cli {
    /// Worker threads for batch gradients and evaluation (default: all
    /// cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a network and write a checkpoint, history and metrics.
    Train(train::TrainArgs),
    /// Score a checkpoint on a labeled feature file.
    Eval(eval::EvalArgs),
    /// Check the explicit context map against the Gram recursion.
    Gramcheck(verify::GramcheckArgs),
    /// Check analytic gradients of the training loss by finite differences.
    Gradcheck(verify::GradcheckArgs),
    /// Train a grid of configurations and tabulate test metrics.
    Ablate(ablate::AblateArgs),
    /// Export per-cell impacts and walk probabilities of one image.
    Inspect(inspect::InspectArgs),
    /// Write a synthetic labeled dataset.
    Synth(synth::SynthArgs),
}

/// Exit status of a command that ran to completion.
pub enum Status {
    Ok,
    /// A verification ran and exceeded its tolerance.
    Failed,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }

    let result = match cli.command {
        Command::Train(a) => train::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Gramcheck(a) => verify::gramcheck(a),
        Command::Gradcheck(a) => verify::gradcheck(a),
        Command::Ablate(a) => ablate::run(a),
        Command::Inspect(a) => inspect::run(a),
        Command::Synth(a) => synth::run(a),
    };
    match result {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Failed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
