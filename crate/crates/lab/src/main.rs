use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(invlab::cli::run(std::env::args_os()))
}
