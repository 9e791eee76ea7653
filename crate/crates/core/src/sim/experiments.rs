//! Multi-episode experiments: aggregation, sweeps, policy comparison and
//! the nominal-versus-adjusted gain tracking trial.

use serde::Serialize;

use super::{par_map, run_episode, EpisodeTrace, Policy, PolicyKind, SimError};
use crate::baseline::PfState;
use crate::config::{Config, ReferenceKind};
use crate::control::GainBook;
use crate::drl::TrainedAgents;
use crate::rng::{stream, Stream};
use crate::robot::{make_reference, RobotState};

/// Scalar metrics of one episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpisodeSummary {
    pub seed: u64,
    pub rate_embb_mbps: f64,
    pub rate_urllc_mbps: f64,
    pub f_mean: f64,
    pub g_mean: f64,
    pub violation_frequency: f64,
    pub tracking_error: f64,
    pub di: f64,
    /// Mean URLLC service rate after the dexterity penalty.
    pub urllc_departure_mbps: f64,
    pub prbs_embb: f64,
    pub prbs_urllc: f64,
    pub reward_embb: f64,
    pub reward_urllc: f64,
}

impl EpisodeSummary {
    pub const METRICS: [&'static str; 12] = [
        "rate_embb_mbps",
        "rate_urllc_mbps",
        "f_mean",
        "g_mean",
        "violation_frequency",
        "tracking_error",
        "di",
        "urllc_departure_mbps",
        "prbs_embb",
        "prbs_urllc",
        "reward_embb",
        "reward_urllc",
    ];

    pub fn metric_values(&self) -> [f64; 12] {
        [
            self.rate_embb_mbps,
            self.rate_urllc_mbps,
            self.f_mean,
            self.g_mean,
            self.violation_frequency,
            self.tracking_error,
            self.di,
            self.urllc_departure_mbps,
            self.prbs_embb,
            self.prbs_urllc,
            self.reward_embb,
            self.reward_urllc,
        ]
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn summarize(trace: &EpisodeTrace) -> EpisodeSummary {
    let r = &trace.records;
    let ne = trace.n_embb;
    let per_user = |sel: &dyn Fn(&super::SlotRecord) -> Vec<f64>| mean(r.iter().flat_map(sel));
    let viol = mean(r.iter().flat_map(|x| x.violations.iter().map(|&v| f64::from(u8::from(v)))));
    EpisodeSummary {
        seed: trace.seed,
        rate_embb_mbps: per_user(&|x| x.rates[..ne].iter().map(|v| v / 1e6).collect()),
        rate_urllc_mbps: per_user(&|x| x.rates[ne..].iter().map(|v| v / 1e6).collect()),
        f_mean: mean(r.iter().map(|x| x.f)),
        g_mean: mean(r.iter().map(|x| x.g)),
        violation_frequency: viol,
        tracking_error: per_user(&|x| x.tracking_error.clone()),
        di: per_user(&|x| x.di.clone()),
        urllc_departure_mbps: per_user(&|x| x.urllc_service_rate.iter().map(|v| v / 1e6).collect()),
        prbs_embb: mean(r.iter().map(|x| x.prbs_embb as f64)),
        prbs_urllc: mean(r.iter().map(|x| x.prbs_urllc as f64)),
        reward_embb: mean(r.iter().map(|x| x.reward_embb.value)),
        reward_urllc: mean(r.iter().map(|x| x.reward_urllc.value)),
    }
}

/// Aggregate over a set of episodes of one policy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub policy: PolicyKind,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub episodes: Vec<EpisodeSummary>,
    /// Sorted per-user-slot rates, Mbps.
    pub rate_cdf_embb: Vec<f64>,
    pub rate_cdf_urllc: Vec<f64>,
}

impl ExperimentResult {
    pub fn from_traces(traces: &[EpisodeTrace], cfg: &Config) -> Self {
        let mut cdf_e = Vec::new();
        let mut cdf_u = Vec::new();
        for t in traces {
            for r in &t.records {
                cdf_e.extend(r.rates[..t.n_embb].iter().map(|v| v / 1e6));
                cdf_u.extend(r.rates[t.n_embb..].iter().map(|v| v / 1e6));
            }
        }
        cdf_e.sort_by(f64::total_cmp);
        cdf_u.sort_by(f64::total_cmp);
        Self {
            policy: traces.first().map_or(PolicyKind::Pf, |t| t.policy),
            config_hash: cfg.hash(),
            seeds: traces.iter().map(|t| t.seed).collect(),
            episodes: traces.iter().map(summarize).collect(),
            rate_cdf_embb: cdf_e,
            rate_cdf_urllc: cdf_u,
        }
    }

    /// Mean and sample standard deviation of a metric over episodes.
    pub fn stat(&self, metric: &str) -> (f64, f64) {
        let Some(i) = EpisodeSummary::METRICS.iter().position(|m| *m == metric) else {
            return (f64::NAN, f64::NAN);
        };
        let v: Vec<f64> = self.episodes.iter().map(|e| e.metric_values()[i]).collect();
        let m = mean(v.iter().copied());
        let sd = if v.len() > 1 {
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        (m, sd)
    }

    pub fn mean(&self, metric: &str) -> f64 {
        self.stat(metric).0
    }
}

/// Run one episode per seed, in seed order, on up to `jobs` threads.
pub fn run_episodes(
    kind: PolicyKind,
    agents: Option<&TrainedAgents>,
    cfg: &Config,
    book: &GainBook,
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<EpisodeTrace>, SimError> {
    if kind == PolicyKind::Drl && agents.is_none() {
        return Err(SimError::Invalid("the drl policy needs a trained checkpoint".into()));
    }
    let steps = cfg.sim.eval_steps;
    par_map(jobs, seeds.to_vec(), |seed| {
        let mut policy = match kind {
            PolicyKind::Drl => Policy::Drl(agents.expect("checked above")),
            PolicyKind::Pf => Policy::Pf(PfState::new(cfg.network.n_users(), cfg.sim.pf_time_constant)),
        };
        run_episode(&mut policy, cfg, book, seed, steps)
    })
    .into_iter()
    .collect()
}

pub fn run_experiment(
    kind: PolicyKind,
    agents: Option<&TrainedAgents>,
    cfg: &Config,
    book: &GainBook,
    seeds: &[u64],
    jobs: usize,
) -> Result<(ExperimentResult, Vec<EpisodeTrace>), SimError> {
    let traces = run_episodes(kind, agents, cfg, book, seeds, jobs)?;
    Ok((ExperimentResult::from_traces(&traces, cfg), traces))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    RayleighScale,
    SamplingInterval,
    DiLevel,
}

impl std::fmt::Display for SweepKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::RayleighScale => "rayleigh-scale",
            Self::SamplingInterval => "sampling-interval",
            Self::DiLevel => "di-level",
        })
    }
}

impl std::str::FromStr for SweepKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rayleigh-scale" => Ok(Self::RayleighScale),
            "sampling-interval" => Ok(Self::SamplingInterval),
            "di-level" => Ok(Self::DiLevel),
            other => Err(format!(
                "unknown sweep kind `{other}` (expected rayleigh-scale, sampling-interval or di-level)"
            )),
        }
    }
}

impl SweepKind {
    /// The config with the swept parameter set to `value`.
    pub fn apply(&self, cfg: &Config, value: &str) -> Result<Config, SimError> {
        let bad = |e: String| SimError::Invalid(format!("{self} value `{value}`: {e}"));
        let key = match self {
            Self::RayleighScale => "rayleigh_scale",
            Self::SamplingInterval => "sampling_interval_s",
            Self::DiLevel => {
                let kind: ReferenceKind = value.parse().map_err(bad)?;
                let mut c = cfg.clone();
                c.control.reference = kind;
                return c.validate().map(|_| c).map_err(|e| bad(e.to_string()));
            }
        };
        let v: f64 = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?;
        cfg.with_overrides(&[format!("{key}={v:?}")]).map_err(|e| bad(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub value: String,
    pub result: ExperimentResult,
}

/// One experiment per value over the same seeds.
pub fn run_sweep(
    kind: SweepKind,
    values: &[String],
    policy: PolicyKind,
    agents: Option<&TrainedAgents>,
    cfg: &Config,
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<SweepPoint>, SimError> {
    if values.is_empty() {
        return Err(SimError::Invalid("sweep needs at least one value".into()));
    }
    if seeds.is_empty() {
        return Err(SimError::Invalid("sweep needs at least one seed".into()));
    }
    values
        .iter()
        .map(|v| {
            let c = kind.apply(cfg, v)?;
            let book = GainBook::new(&c.control)?;
            let (result, _) = run_experiment(policy, agents, &c, &book, seeds, jobs)?;
            Ok(SweepPoint {
                value: v.clone(),
                result,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairedDifference {
    pub seed: u64,
    /// DRL minus PF.
    pub violation_frequency: f64,
    pub rate_urllc_mbps: f64,
    pub rate_embb_mbps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub drl: ExperimentResult,
    pub pf: ExperimentResult,
    pub paired: Vec<PairedDifference>,
}

/// Matched-seed episodes under the trained agents and under PF.
pub fn compare_policies(
    agents: &TrainedAgents,
    cfg: &Config,
    book: &GainBook,
    seeds: &[u64],
    jobs: usize,
) -> Result<(ComparisonReport, Vec<EpisodeTrace>, Vec<EpisodeTrace>), SimError> {
    let (drl, drl_traces) = run_experiment(PolicyKind::Drl, Some(agents), cfg, book, seeds, jobs)?;
    let (pf, pf_traces) = run_experiment(PolicyKind::Pf, None, cfg, book, seeds, jobs)?;
    let paired = drl
        .episodes
        .iter()
        .zip(&pf.episodes)
        .map(|(d, p)| PairedDifference {
            seed: d.seed,
            violation_frequency: d.violation_frequency - p.violation_frequency,
            rate_urllc_mbps: d.rate_urllc_mbps - p.rate_urllc_mbps,
            rate_embb_mbps: d.rate_embb_mbps - p.rate_embb_mbps,
        })
        .collect();
    Ok((ComparisonReport { drl, pf, paired }, drl_traces, pf_traces))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrackingRow {
    pub seed: u64,
    pub step: usize,
    pub delay_steps: usize,
    pub error_nominal: f64,
    pub error_adjusted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackingTrial {
    pub seed: u64,
    pub delay_steps: usize,
    pub mean_error_nominal: f64,
    pub mean_error_adjusted: f64,
    pub rows: Vec<TrackingRow>,
}

/// Two identical robots follow the same reference under a constant delay of
/// `delay_steps`; one keeps the nominal gain, the other uses the gain adjusted
/// for that delay.
pub fn tracking_trial(
    cfg: &Config,
    book: &GainBook,
    seed: u64,
    delay_steps: usize,
    steps: usize,
) -> Result<TrackingTrial, SimError> {
    let c = &cfg.control;
    let reference = make_reference(
        c.reference,
        steps + 1,
        book.plant.tracked.len(),
        c.sampling_interval_s,
        c.reference_waypoints.as_deref(),
        &mut stream(seed, Stream::Reference),
    )?;
    let mut nominal = RobotState::from_config(book.plant.clone(), book.nominal.gain.clone(), c);
    let mut adjusted = RobotState::from_config(book.plant.clone(), book.gain_for(delay_steps)?.clone(), c);
    let mut rows = Vec::with_capacity(steps);
    for k in 0..steps {
        let sp = reference.setpoint(k);
        let en = nominal.step(sp, delay_steps)?.tracking_error;
        let ea = adjusted.step(sp, delay_steps)?.tracking_error;
        rows.push(TrackingRow {
            seed,
            step: k,
            delay_steps,
            error_nominal: en,
            error_adjusted: ea,
        });
    }
    Ok(TrackingTrial {
        seed,
        delay_steps,
        mean_error_nominal: mean(rows.iter().map(|r| r.error_nominal)),
        mean_error_adjusted: mean(rows.iter().map(|r| r.error_adjusted)),
        rows,
    })
}
