//! `tags`: data generation, training, negative generation and evaluation.
//!
//! Every subcommand takes an optional `--config FILE` of `key = value` lines
//! followed by `--key value` overrides. Exit codes: 0 success, 1 usage or
//! configuration error, 2 runtime error.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{Failure, EXIT_USAGE};
use crate::config::{RunConfig, KEYS};

#[derive(Parser)]
#[command(name = "tags", version, about = "Synthetic hard negatives for image-text matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (keys: n, seed, out).
    Datagen(Args),
    /// Train a model (keys: data, checkpoint, metrics, steps and all hyperparameters).
    Train(Args),
    /// Write the filtered negative pool of each image's first caption (keys: data, checkpoint, out).
    GenerateNegatives(Args),
    /// Report retrieval recall (keys: data, checkpoint or oracle, out).
    Eval(Args),
    /// Write one difficulty-gap histogram per negative strategy (keys: data, checkpoint, out).
    CompareStrategies(Args),
}

#[derive(clap::Args)]
struct Args {
    /// `--config FILE` and `--key value` pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OPTIONS")]
    options: Vec<String>,
}

fn keys_help() -> String {
    format!("recognised keys: {}", KEYS.join(", "))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let (args, body): (&Args, fn(&RunConfig) -> Result<(), Failure>) = match &cli.command {
        Command::Datagen(a) => (a, commands::datagen),
        Command::Train(a) => (a, commands::train),
        Command::GenerateNegatives(a) => (a, commands::generate),
        Command::Eval(a) => (a, commands::eval),
        Command::CompareStrategies(a) => (a, commands::compare),
    };
    if args.options.iter().any(|o| o == "--help" || o == "-h") {
        println!("{}", keys_help());
        return Ok(());
    }
    let config = RunConfig::from_args(&args.options)?;
    body(&config)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            if f.code == EXIT_USAGE {
                eprintln!("{}", keys_help());
            }
            ExitCode::from(f.code)
        }
    }
}
