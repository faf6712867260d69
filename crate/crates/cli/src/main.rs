use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = nwp_cli::Cli::parse();
    match nwp_cli::run(cli) {
        Ok(outcome) => {
            println!("{}", serde_json::to_string(&outcome).expect("outcome serializes"));
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", nwp_cli::error_record(&err));
            ExitCode::from(1)
        }
    }
}
