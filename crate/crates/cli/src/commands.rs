use std::fmt;
use std::path::Path;

use anyhow::{anyhow, Context};
use teleslice_core::config::{load_config, Config};
use teleslice_core::control::{synthesize_gain, GainBook, Plant};
use teleslice_core::drl::{train, Checkpoint, TrainedAgents};
use teleslice_core::sim::experiments::{compare_policies, run_experiment, run_sweep, tracking_trial, SweepKind};
use teleslice_core::sim::output::{
    sweep_file_name, to_file, write_learning_curve, write_queue_trace, write_rates_cdf, write_summaries, write_sweep,
    write_trace, write_tracking, write_violations,
};
use teleslice_core::sim::{PolicyKind, SimError};

use crate::manifest::RunManifest;
use crate::{Cli, Command};

/// A failure and the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or usage: exit 1.
    Config(anyhow::Error),
    /// Fault while running: exit 2.
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 1,
            Self::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(e) | Self::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

fn config_err(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Config(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(e.into())
}

fn sim_err(e: SimError) -> CliError {
    match e {
        SimError::Invalid(_) => config_err(e),
        other => runtime(other),
    }
}

fn resolve_config(cli: &Cli) -> Result<Config, CliError> {
    let g = &cli.global;
    let mut overrides = Config::env_overrides();
    overrides.extend(g.sets.iter().cloned());
    if g.eq12_as_printed {
        overrides.push("eq12_as_printed=true".into());
    }
    if let Some(seed) = g.seed {
        overrides.push(format!("seed={seed}"));
    }
    match &cli.command {
        Command::Train { episodes, steps } => {
            overrides.extend(episodes.map(|e| format!("episodes={e}")));
            overrides.extend(steps.map(|s| format!("steps_per_episode={s}")));
        }
        Command::Evaluate { steps, .. } => overrides.extend(steps.map(|s| format!("eval_steps={s}"))),
        Command::SynthGain { max_delay } => overrides.extend(max_delay.map(|d| format!("max_delay_steps={d}"))),
        _ => {}
    }
    load_config(g.config.as_deref(), &overrides).map_err(config_err)
}

fn policy_kind(cli: &Cli) -> Result<PolicyKind, CliError> {
    match &cli.global.policy {
        Some(p) => p.parse().map_err(|e: String| config_err(anyhow!(e))),
        None if cli.global.checkpoint.is_some() => Ok(PolicyKind::Drl),
        None => Ok(PolicyKind::Pf),
    }
}

fn load_agents(cli: &Cli, cfg: &Config) -> Result<TrainedAgents, CliError> {
    let path = cli
        .global
        .checkpoint
        .as_deref()
        .ok_or_else(|| config_err(anyhow!("the drl policy needs --checkpoint")))?;
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading checkpoint {}", path.display()))
        .map_err(config_err)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)
        .with_context(|| format!("parsing checkpoint {}", path.display()))
        .map_err(config_err)?;
    TrainedAgents::from_checkpoint(&ckpt, cfg).map_err(config_err)
}

fn eval_seeds(cfg: &Config, reps: usize) -> Result<Vec<u64>, CliError> {
    if reps == 0 {
        return Err(config_err(anyhow!("--reps must be at least 1")));
    }
    let base = cfg.drl.seed;
    Ok((0..reps as u64).map(|i| base.wrapping_add(i)).collect())
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::Train { .. } => "train",
        Command::Evaluate { .. } => "evaluate",
        Command::Compare { .. } => "compare",
        Command::Sweep { .. } => "sweep",
        Command::SynthGain { .. } => "synth-gain",
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    std::fs::write(path, text + "\n")
        .with_context(|| format!("writing {}", path.display()))
        .map_err(runtime)
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve_config(cli)?;
    let out = cli.global.out_dir.clone();
    let jobs = cli.global.jobs.max(1);
    let seeds = match &cli.command {
        Command::Evaluate { reps, .. } | Command::Compare { reps, .. } | Command::Sweep { reps, .. } => {
            eval_seeds(&cfg, *reps)?
        }
        _ => vec![cfg.drl.seed],
    };
    let mut manifest = RunManifest::new(
        subcommand_name(&cli.command),
        &cfg,
        seeds.clone(),
        &out,
        cli.global.checkpoint.clone(),
    );
    manifest
        .write()
        .with_context(|| format!("writing manifest in {}", out.display()))
        .map_err(runtime)?;
    let result = dispatch(cli, &cfg, &seeds, &out, jobs);
    manifest
        .finish(result.as_ref().map(|_| ()).map_err(|e| e.to_string()))
        .context("finalizing manifest")
        .map_err(runtime)?;
    result
}

fn dispatch(cli: &Cli, cfg: &Config, seeds: &[u64], out: &Path, jobs: usize) -> Result<(), CliError> {
    match &cli.command {
        Command::Train { .. } => {
            let book = GainBook::new(&cfg.control).map_err(runtime)?;
            let total = cfg.drl.episodes;
            let trained = train::train(cfg, &book, |row| {
                if (row.episode + 1) % 10 == 0 || row.episode + 1 == total {
                    eprintln!(
                        "episode {}/{total}: reward eMBB {:.3} URLLC {:.3}, G mean {:.1}",
                        row.episode + 1,
                        row.reward_embb,
                        row.reward_urllc,
                        row.g_mean
                    );
                }
            })
            .map_err(sim_err)?;
            write_json(&out.join("checkpoint.json"), &trained.checkpoint(cfg))?;
            to_file(&out.join("learning_curve.csv"), |w| write_learning_curve(w, &trained.curve)).map_err(sim_err)?;
            println!("{}", out.join("checkpoint.json").display());
        }
        Command::Evaluate { .. } => {
            let kind = policy_kind(cli)?;
            let agents = match kind {
                PolicyKind::Drl => Some(load_agents(cli, cfg)?),
                PolicyKind::Pf => None,
            };
            let book = GainBook::new(&cfg.control).map_err(runtime)?;
            let (result, traces) = run_experiment(kind, agents.as_ref(), cfg, &book, seeds, jobs).map_err(sim_err)?;
            for t in &traces {
                let name = format!("trace_{kind}_seed{}.csv", t.seed);
                to_file(&out.join(name), |w| write_trace(w, t)).map_err(sim_err)?;
            }
            to_file(&out.join("queue_trace.csv"), |w| write_queue_trace(w, &traces)).map_err(sim_err)?;
            to_file(&out.join("rates_cdf.csv"), |w| write_rates_cdf(w, &[&result])).map_err(sim_err)?;
            to_file(&out.join("summary.csv"), |w| write_summaries(w, &[&result])).map_err(sim_err)?;
            write_json(&out.join("summary.json"), &result)?;
            print_means(&[&result]);
        }
        Command::Compare { tracking_steps, .. } => {
            let agents = load_agents(cli, cfg)?;
            let book = GainBook::new(&cfg.control).map_err(runtime)?;
            let (report, drl_traces, pf_traces) =
                compare_policies(&agents, cfg, &book, seeds, jobs).map_err(sim_err)?;
            let violation_delay = 2 * cfg.control.max_delay_steps;
            let trials = seeds
                .iter()
                .map(|&s| tracking_trial(cfg, &book, s, violation_delay, *tracking_steps))
                .collect::<Result<Vec<_>, _>>()
                .map_err(sim_err)?;
            let all: Vec<_> = drl_traces.into_iter().chain(pf_traces).collect();
            to_file(&out.join("violations.csv"), |w| write_violations(w, &report)).map_err(sim_err)?;
            to_file(&out.join("rates_cdf.csv"), |w| write_rates_cdf(w, &[&report.drl, &report.pf])).map_err(sim_err)?;
            to_file(&out.join("queue_trace.csv"), |w| write_queue_trace(w, &all)).map_err(sim_err)?;
            to_file(&out.join("summary.csv"), |w| write_summaries(w, &[&report.drl, &report.pf])).map_err(sim_err)?;
            to_file(&out.join("tracking.csv"), |w| write_tracking(w, &trials)).map_err(sim_err)?;
            write_json(&out.join("comparison.json"), &report)?;
            print_means(&[&report.drl, &report.pf]);
            let nominal = trials.iter().map(|t| t.mean_error_nominal).sum::<f64>() / trials.len() as f64;
            let adjusted = trials.iter().map(|t| t.mean_error_adjusted).sum::<f64>() / trials.len() as f64;
            println!("tracking error at delay {violation_delay}: nominal {nominal:.4}, adjusted {adjusted:.4}");
        }
        Command::Sweep { kind, values, .. } => {
            let sweep: SweepKind = kind.parse().map_err(|e: String| config_err(anyhow!(e)))?;
            let policy = policy_kind(cli)?;
            let agents = match policy {
                PolicyKind::Drl => Some(load_agents(cli, cfg)?),
                PolicyKind::Pf => None,
            };
            let points = run_sweep(sweep, values, policy, agents.as_ref(), cfg, seeds, jobs).map_err(sim_err)?;
            to_file(&out.join(sweep_file_name(sweep)), |w| write_sweep(w, &points)).map_err(sim_err)?;
            write_json(&out.join(format!("sweep_{sweep}.json")), &points)?;
            for p in &points {
                println!(
                    "{sweep}={}: eMBB {:.2} Mbps, URLLC {:.2} Mbps, violations {:.5}, DI {:.3}",
                    p.value,
                    p.result.mean("rate_embb_mbps"),
                    p.result.mean("rate_urllc_mbps"),
                    p.result.mean("violation_frequency"),
                    p.result.mean("di")
                );
            }
        }
        Command::SynthGain { .. } => {
            let plant = Plant::from_config(&cfg.control).map_err(config_err)?;
            let cert = synthesize_gain(&plant, &cfg.control, cfg.control.max_delay_steps).map_err(runtime)?;
            write_json(&out.join("gain_certificate.json"), &cert)?;
            println!("{}", serde_json::to_string_pretty(&cert).map_err(runtime)?);
        }
    }
    Ok(())
}

fn print_means(results: &[&teleslice_core::ExperimentResult]) {
    for r in results {
        println!(
            "{}: eMBB {:.2} Mbps, URLLC {:.2} Mbps, violations {:.5}, F {:.2}, G {:.2}",
            r.policy,
            r.mean("rate_embb_mbps"),
            r.mean("rate_urllc_mbps"),
            r.mean("violation_frequency"),
            r.mean("f_mean"),
            r.mean("g_mean")
        );
    }
}
