use std::process::ExitCode;

fn main() -> ExitCode {
    let stdin = std::io::stdin();
    let code = phaseloc_gateway::run(std::env::args_os(), &mut stdin.lock(), &mut std::io::stdout());
    ExitCode::from(code)
}
