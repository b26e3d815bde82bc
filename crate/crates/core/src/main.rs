use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(algaedet::cli::run())
}
