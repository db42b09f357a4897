use std::process::ExitCode;

fn main() -> ExitCode {
    let seed = std::env::var("ATTAIN_SEED").ok();
    let code = goal_attain_cli::run(
        std::env::args_os(),
        seed.as_deref(),
        &mut std::io::stdout().lock(),
        &mut std::io::stderr().lock(),
    );
    ExitCode::from(code as u8)
}
