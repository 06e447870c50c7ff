use std::process::ExitCode;

fn main() -> ExitCode {
    shapematch::cli::main_with_args(std::env::args_os())
}
