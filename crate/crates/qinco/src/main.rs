use std::process::ExitCode;

fn main() -> ExitCode {
    match qinco::cli::run(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qinco: {e}");
            ExitCode::FAILURE
        }
    }
}
