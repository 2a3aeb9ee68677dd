//! `factorweights` command-line entry point.
//!
//! Every invocation prints a one-line JSON summary as the last line of
//! standard output. Exit codes: 0 success, 1 verification failure, 2 usage or
//! I/O error.

mod commands;

use std::process::ExitCode;

use clap::Parser;
use serde_json::json;

use commands::{Cli, Outcome};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                println!("{}", json!({ "ok": true }));
                return ExitCode::SUCCESS;
            }
            let rendered = e.render().to_string();
            eprint!("{rendered}");
            if !rendered.contains("Usage:") {
                use clap::CommandFactory;
                eprintln!("\n{}", Cli::command().render_usage());
            }
            println!("{}", json!({ "ok": false, "error": "usage" }));
            return ExitCode::from(2);
        }
    };
    let name = cli.command.name();
    match commands::run(cli.command) {
        Ok(Outcome { summary, verified }) => {
            println!("{summary}");
            if verified {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            println!("{}", json!({ "command": name, "ok": false, "error": format!("{e:#}") }));
            ExitCode::from(2)
        }
    }
}
