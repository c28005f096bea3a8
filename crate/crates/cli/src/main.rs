use clap::Parser;

fn main() -> std::process::ExitCode {
    taskcomm_cli::main_with(taskcomm_cli::Cli::parse())
}
