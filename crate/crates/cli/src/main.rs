//! `incepformer`: cost analysis, gradient checks, training, evaluation and
//! mask inference.
//!
//! Exit codes: 0 success, 1 gradient check failure, 2 usage error, 3 invalid
//! configuration, 4 file or checkpoint error, 5 runtime failure.

mod analyze;
mod args;
mod error;
mod gradcheck;
mod infer;
mod setup;
mod train;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(error::code::USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Analyze(a) => analyze::run(a),
        Command::Gradcheck(a) => gradcheck::run(a),
        Command::Train(a) => train::run_train(a),
        Command::Eval(a) => train::run_eval(a),
        Command::Infer(a) => infer::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
