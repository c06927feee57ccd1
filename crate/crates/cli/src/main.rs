//! critflow: batch front-end for the gradient-flow laboratory.
//!
//! Reads a TOML/JSON run configuration, executes the requested scenario
//! and writes deterministic CSV/JSON/SVG artifacts plus a manifest. Exit
//! codes: 0 success, 2 configuration error, 3 numerical failure (partial
//! artifacts and failure.json are left in the output directory).

mod config;
mod plot;
mod scenarios;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use config::RunConfig;
use scenarios::{RunError, Runner};

#[derive(Parser, Debug)]
#[command(name = "critflow", version, about = "vanishing-viscosity gradient flow laboratory")]
struct Cli {
    /// Run configuration (TOML, or JSON with a .json extension).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress progress notes.
    #[arg(long)]
    quiet: bool,
    /// Skip SVG emission.
    #[arg(long)]
    no_plots: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    if let Ok(threads) = std::env::var("CRITFLOW_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        } else {
            eprintln!("CRITFLOW_THREADS is not a number: {threads}");
            return ExitCode::from(2);
        }
    }

    let mut run_config = match RunConfig::load(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("configuration error: {e:#}");
            return ExitCode::from(2);
        }
    };
    if let Some(seed) = cli.seed {
        run_config.seed = seed;
    }
    let out_dir = cli
        .output
        .unwrap_or_else(|| PathBuf::from(&run_config.output_dir));

    let runner = Runner {
        config: run_config,
        out_dir,
        no_plots: cli.no_plots,
        quiet: cli.quiet,
    };
    match runner.execute() {
        Ok(()) => ExitCode::SUCCESS,
        Err(RunError::Config(m)) => {
            eprintln!("configuration error: {m}");
            ExitCode::from(2)
        }
        Err(RunError::Numerical(m)) => {
            eprintln!("numerical failure: {m}");
            ExitCode::from(3)
        }
    }
}
