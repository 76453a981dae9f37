use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use datr_service::cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(output) => {
            let mut stdout = std::io::stdout().lock();
            let _ = stdout.write_all(output.render(cli.json).as_bytes());
            let _ = stdout.flush();
            ExitCode::from(output.exit_code as u8)
        }
        Err(e) => {
            if cli.json {
                eprintln!("{}", serde_json::json!({ "error": e.to_string() }));
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::FAILURE
        }
    }
}
