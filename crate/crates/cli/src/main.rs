use std::path::PathBuf;

use clap::Parser;
use kfp_cli::commands::{execute, Invocation, Verb, EXIT_INVALID};

/// Verification runs for the kinetic Fokker-Planck toolkit.
#[derive(Parser)]
#[command(name = "kfp", version)]
struct Cli {
    verb: Verb,
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the report and artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the global seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; rayon's default when omitted.
    #[arg(long)]
    threads: Option<usize>,
}

fn main() {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            std::process::exit(EXIT_INVALID);
        }
    }
    let inv = Invocation {
        verb: cli.verb,
        config: cli.config,
        out: cli.out,
        seed: cli.seed,
    };
    std::process::exit(execute(&inv));
}
