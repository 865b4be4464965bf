use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(litefbcn_cli::run(std::env::args_os()))
}
