use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(logfrag_cli::run(std::env::args_os()))
}
