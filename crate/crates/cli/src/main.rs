use std::process::ExitCode;

use clap::Parser;

mod commands;
mod error;

use error::CliError;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("WHISPERSV_LOG", "warn")).init();
    let cli = match commands::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            return report(CliError::Usage(first_line(&e.to_string())));
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e),
    }
}

fn first_line(msg: &str) -> String {
    let line = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
    line.trim_start_matches("error: ").trim().to_string()
}

fn report(e: CliError) -> ExitCode {
    eprintln!("error: {}: {}", e.kind(), e.to_string().replace('\n', " "));
    ExitCode::from(e.exit_code())
}
