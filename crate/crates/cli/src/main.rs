use std::process::ExitCode;

use clap::Parser;
use subgroup_ate_cli::{run, Cli};

fn main() -> ExitCode {
    ExitCode::from(run(Cli::parse()))
}
