//! Command-line front end. Exit codes: 0 success, 1 configuration
//! error (including bad flags), 2 runtime or I/O error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedsim::Error;
use fedsim_cli::{config, report, runner};

#[derive(Parser)]
#[command(name = "sim-cli", version, about = "Deterministic federated fine-tuning cost simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute one configuration and write metrics to a directory
    Run {
        /// Path to a `key = value` config file
        #[arg(long)]
        config: PathBuf,
        /// Output directory (created if absent)
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run a config once per value of one key
    Sweep {
        /// Path to the base config file
        #[arg(long)]
        config: PathBuf,
        /// Dotted config key to vary, e.g. lora.rank
        #[arg(long)]
        param: String,
        /// Comma-separated values, one run each
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Root output directory; runs land in `<param>=<value>` subdirs
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize finished runs and rank them
    Report {
        /// Run directories written by `run` or `sweep`
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Also write the combined per-round series as CSV
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn read_config(path: &Path) -> fedsim::Result<String> {
    fs::read_to_string(path).map_err(|e| runner::pathed(path, e))
}

fn dispatch(cmd: Cmd) -> fedsim::Result<()> {
    match cmd {
        Cmd::Run { config: cfg_path, out } => {
            let cfg = config::parse_config(&read_config(&cfg_path)?)?;
            let report = runner::run(&cfg)?;
            runner::write_run(&cfg, &report, &out)?;
            println!("wrote {}", out.join("metrics.csv").display());
        }
        Cmd::Sweep { config: cfg_path, param, values, out } => {
            let raw = config::parse_raw(&read_config(&cfg_path)?)?;
            runner::sweep(&raw, &param, &values, &out)?;
            println!("wrote {}", out.join("sweep.csv").display());
        }
        Cmd::Report { dirs, csv } => {
            let text = report::report(&dirs, csv.as_deref())?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; real flag errors
            // are configuration errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
