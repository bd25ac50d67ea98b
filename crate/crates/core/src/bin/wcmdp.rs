use std::process::ExitCode;

fn main() -> ExitCode {
    wcmdp::cli::main_entry()
}
