use std::process::ExitCode;

use clap::Parser;
use gpmpc::cli::{dispatch, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    ExitCode::from(dispatch(&cli))
}
