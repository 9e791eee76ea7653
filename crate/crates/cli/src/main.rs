//! `teleslice` command-line entry point.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Network-slicing teleoperation simulator.
///
/// Configuration is layered: defaults, then `--config`, then `TELESLICE_<KEY>`
/// environment variables, then `--set`, then the dedicated flags.
#[derive(Debug, Parser)]
#[command(name = "teleslice", version, about)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Base seed. Training uses it directly; evaluations use `seed..seed+reps`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Flat TOML config file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set rayleigh_scale=1.5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Output directory for CSV, JSON and the run manifest.
    #[arg(long, global = true, value_name = "DIR", default_value = "runs")]
    pub out_dir: PathBuf,
    /// Allocation policy: `drl` or `pf`. Defaults to `drl` when a checkpoint is given, else `pf`.
    #[arg(long, global = true)]
    pub policy: Option<String>,
    /// Trained checkpoint for the `drl` policy.
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Worker threads for independent episodes.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Use the delay slack with its literal sign instead of the reliability-consistent one.
    #[arg(long, global = true)]
    pub eq12_as_printed: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train both slice agents; writes checkpoint.json and learning_curve.csv.
    Train {
        /// Episode budget (overrides `episodes`).
        #[arg(long)]
        episodes: Option<usize>,
        /// Slots per episode (overrides `steps_per_episode`).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run a frozen policy; writes per-episode trace CSVs and aggregates.
    Evaluate {
        /// Number of seeds.
        #[arg(long, default_value_t = 1)]
        reps: usize,
        /// Slots per episode (overrides `eval_steps`).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Matched-seed DRL versus PF comparison plus the nominal/adjusted gain tracking trial.
    Compare {
        /// Number of matched seeds.
        #[arg(long, default_value_t = 20)]
        reps: usize,
        /// Control steps in each tracking trial.
        #[arg(long, default_value_t = 500)]
        tracking_steps: usize,
    },
    /// Sweep one parameter; writes sweep_<kind>.csv.
    Sweep {
        /// `rayleigh-scale`, `sampling-interval` or `di-level`.
        #[arg(long)]
        kind: String,
        /// Comma-separated values; di-level takes `low-di,moderate-di,high-di`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Seeds per value.
        #[arg(long, default_value_t = 20)]
        reps: usize,
    },
    /// Synthesize the nominal gain and print its certificate as JSON.
    SynthGain {
        /// Certified delay bound in control steps (overrides `max_delay_steps`).
        #[arg(long)]
        max_delay: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code())
        }
    }
}
