use std::process::ExitCode;

fn main() -> ExitCode {
    rainbow_cl::cli::main_with_args(std::env::args_os())
}
