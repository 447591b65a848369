use clap::Parser;
use std::process::ExitCode;

fn main() -> ExitCode {
    aiitl::cli::main_with(aiitl::cli::Cli::parse())
}
