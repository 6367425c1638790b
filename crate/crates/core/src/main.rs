use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(plpp::cli::run(std::env::args_os()))
}
