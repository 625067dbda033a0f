use std::process::ExitCode;

fn main() -> ExitCode {
    rpo_lab::cli::main_with(std::env::args_os())
}
