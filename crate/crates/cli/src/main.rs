use std::fs::File;
use std::io::{self, BufWriter};
use std::process::ExitCode;

use clap::Parser;
use siri_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = run(cli.command, &cli.config).and_then(|table| match &cli.config.out {
        Some(path) => table.write_csv(BufWriter::new(File::create(path)?)),
        None => table.write_csv(io::stdout().lock()),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bench: {e}");
            ExitCode::FAILURE
        }
    }
}
