use std::process::ExitCode;

fn main() -> ExitCode {
    unlearn_gateway::cli::run(std::env::args_os())
}
