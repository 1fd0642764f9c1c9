use std::process::ExitCode;

use clap::Parser;
use corgi::cli::{error_line, run, Cli};

// Training allocates and frees large edge matrices every step; the system
// allocator maps and unmaps each one.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
