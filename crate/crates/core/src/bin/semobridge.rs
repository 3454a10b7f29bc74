use std::process::ExitCode;

fn main() -> ExitCode {
    semobridge::cli::main_with_args(std::env::args_os())
}
