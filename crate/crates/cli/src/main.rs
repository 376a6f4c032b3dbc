#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod output;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use config::RunConfig;
use run::{run, RunOptions};

/// Runs one experiment described by a TOML or JSON config file.
#[derive(Debug, Parser)]
#[command(name = "dpmf", version)]
struct Cli {
    /// Config file; the format follows the extension (.toml or .json).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding `output_dir` in the config.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Master seed, overriding `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Let failed invariant checks decide the exit status (default).
    #[arg(long, overrides_with = "no_check")]
    check: bool,
    /// Report invariant checks without failing on them.
    #[arg(long = "no-check", overrides_with = "check")]
    no_check: bool,
    /// Print nothing but errors.
    #[arg(long)]
    quiet: bool,
    /// Also write the passage kernel from this start position along the solved clock.
    #[arg(long, value_name = "X")]
    dump_kernel: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut config = match RunConfig::load(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(dir) = cli.output {
        config.output_dir = dir;
    } else if config.output_dir.is_relative() {
        config.output_dir = config.base_dir.join(&config.output_dir);
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let options = RunOptions { dump_kernel: cli.dump_kernel };
    let summary = match run(&config, &options) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if !cli.quiet {
        for c in &summary.checks {
            let mark = if c.passed { "PASS" } else { "FAIL" };
            if c.detail.is_empty() {
                println!("{mark}  {}", c.name);
            } else {
                println!("{mark}  {}: {}", c.name, c.detail);
            }
        }
        println!("wrote {} files and summary.json to {}", summary.files.len(), config.output_dir.display());
    }
    if cli.no_check || summary.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
