use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(cldta_cli::run(std::env::args_os()))
}
