use std::process::ExitCode;

use decoupled_dt::cli::{run, LOG_ENV};

fn main() -> ExitCode {
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).format_timestamp(None).try_init();
    let stdout = std::io::stdout();
    let code = run(std::env::args_os(), &mut stdout.lock());
    ExitCode::from(code as u8)
}
