use std::process::ExitCode;

fn main() -> ExitCode {
    nifgen::cli::main()
}
