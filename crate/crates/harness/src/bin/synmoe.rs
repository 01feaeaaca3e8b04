use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;

fn main() -> ExitCode {
    let args: Vec<_> = std::env::args_os().collect();
    let code = catch_unwind(AssertUnwindSafe(|| synmoe::cli::run(args))).unwrap_or(2);
    ExitCode::from(code as u8)
}
