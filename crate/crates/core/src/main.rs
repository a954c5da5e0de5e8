use std::process::ExitCode;

use clap::Parser;
use duesenberry::cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    // DSB_THREADS sizes the worker pool; results do not depend on it.
    if let Some(n) = std::env::var("DSB_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: DSB_THREADS ignored: {e}");
        }
    }
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
