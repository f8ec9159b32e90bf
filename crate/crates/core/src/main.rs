//! `seqval` binary entry point.

use std::process;

use clap::Parser;

use seqval::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            process::exit(i32::from(e.exit_code()));
        }
    }
}
