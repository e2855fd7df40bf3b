use std::process::ExitCode;

fn main() -> ExitCode {
    pencil_lab::cli::run_from(std::env::args_os())
}
