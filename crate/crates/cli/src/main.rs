use std::process::ExitCode;

use clap::Parser;
use dash_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            let json = serde_json::to_string_pretty(&out.json).expect("values serialize");
            if let Some(path) = &cli.json_out {
                if let Err(e) = std::fs::write(path, &json) {
                    eprintln!("{}", serde_json::json!({ "error": { "kind": "data", "message": format!("{}: {e}", path.display()) } }));
                    return ExitCode::from(dash_cli::EXIT_DATA);
                }
            }
            match (&out.table, cli.table) {
                (Some(table), true) => print!("{table}"),
                _ => println!("{json}"),
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e }));
            ExitCode::from(e.exit_code)
        }
    }
}
