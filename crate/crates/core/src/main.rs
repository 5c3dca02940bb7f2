use std::process::ExitCode;

fn main() -> ExitCode {
    mxscale::cli::main_with_args(std::env::args_os())
}
