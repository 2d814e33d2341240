use clap::Parser;
use epplan::cli::{self, Cli, CONFIG_ENV};
use std::path::PathBuf;
use std::process::ExitCode;

fn main() -> ExitCode {
    let args = Cli::parse();
    let env_file = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
    match cli::run(&args, env_file.as_deref()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("epplan: {e}");
            ExitCode::FAILURE
        }
    }
}
