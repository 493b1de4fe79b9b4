use std::process::ExitCode;

fn main() -> ExitCode {
    dynpl::cli::run()
}
