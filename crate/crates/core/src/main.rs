use std::process::ExitCode;

fn main() -> ExitCode {
    rapgen::cli::main_entry()
}
