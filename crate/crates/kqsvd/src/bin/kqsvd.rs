use std::process::ExitCode;

fn main() -> ExitCode {
    kqsvd::cli::run(std::env::args_os())
}
