use std::process::ExitCode;

fn main() -> ExitCode {
    tfk_core::cli::main()
}
