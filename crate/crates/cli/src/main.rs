use std::process::ExitCode;

use clap::Parser;

mod args;
mod commands;
mod error;
mod files;

use args::{Cli, Command};
use error::CliError;

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        bodyfit::par::init_threads(threads);
    }
    match cli.command {
        Command::ToyModel(a) => commands::toy_model(a),
        Command::Synth(a) => commands::synth(a),
        Command::Samples(a) => commands::samples(a),
        Command::TrainPrior(a) => commands::train_prior(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Fit(a) => commands::fit(a),
        Command::Eval(a) => commands::eval(a),
        Command::InitConfig(a) => commands::init_config(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
