use std::process::ExitCode;

fn main() -> ExitCode {
    attnmove::cli::main()
}
