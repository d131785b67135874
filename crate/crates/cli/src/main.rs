use std::process::ExitCode;

use clap::Parser;
use snn_angvel_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let line = serde_json::json!({
                "error": {
                    "kind": "usage",
                    "location": "",
                    "message": message.lines().next().unwrap_or_default().trim_start_matches("error: "),
                }
            });
            eprintln!("{line}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_line());
            ExitCode::FAILURE
        }
    }
}
