//! The closed loop: channel, allocation, rates, delays, robots, dexterity,
//! queues, Lagrangian and rewards, one decision slot at a time.

pub mod experiments;
pub mod output;

use serde::Serialize;
use thiserror::Error;

use crate::baseline::{pf_allocate, PfState};
use crate::channel::{
    compute_rates, sample_channel, slice_labels, validate_allocation, AllocationViolation,
    ChannelError, ChannelState, LinkBudget, PrbAllocation, Slice,
};
use crate::config::Config;
use crate::control::{ControlError, GainBook};
use crate::drl::train::{observe, slot_rewards, ObsNormalizer, RewardParts};
use crate::drl::{coordinate_allocations, AgentAction, DrlError, TrainedAgents};
use crate::objective::{configured_slack, cost_h, drift_plus_penalty, sample_delays, LagrangianState};
use crate::queues::{
    packets_per_slot, sample_embb_arrivals, sample_urllc_arrivals, step_queues, urllc_departure,
    SliceQueues,
};
use crate::rng::{stream, SimRng, Stream};
use crate::robot::{make_reference, DiComponents, DiWindow, ReferenceTrajectory, RobotError, RobotState};

/// Longest delay, in seconds, that widens the arrival window.
const MAX_ARRIVAL_WINDOW_DELAY_S: f64 = 1.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Robot(#[from] RobotError),
    #[error(transparent)]
    Drl(#[from] DrlError),
    #[error("slot {slot}: infeasible allocation ({violation})")]
    Infeasible { slot: u64, violation: AllocationViolation },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Drl,
    Pf,
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Drl => "drl",
            Self::Pf => "pf",
        })
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "drl" => Ok(Self::Drl),
            "pf" => Ok(Self::Pf),
            other => Err(format!("unknown policy `{other}` (expected drl or pf)")),
        }
    }
}

/// Everything observed in one slot.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlotRecord {
    pub slot: u64,
    pub prbs_embb: usize,
    pub prbs_urllc: usize,
    /// Owner of each PRB.
    pub owners: Vec<usize>,
    /// Per-user rates in bits/s, eMBB users first.
    pub rates: Vec<f64>,
    pub f: f64,
    pub g: f64,
    pub urllc_backlog: Vec<f64>,
    pub embb_backlog: Vec<f64>,
    pub urllc_arrivals: Vec<f64>,
    pub urllc_departures: Vec<f64>,
    pub embb_arrivals: Vec<f64>,
    pub embb_departures: Vec<f64>,
    /// URLLC service rate after the dexterity penalty, bits/s.
    pub urllc_service_rate: Vec<f64>,
    pub delays: Vec<f64>,
    pub violations: Vec<bool>,
    pub delay_steps: Vec<usize>,
    /// Whether a robot ran an adjusted gain in this slot.
    pub adjusted: Vec<bool>,
    pub di: Vec<f64>,
    pub tracking_error: Vec<f64>,
    pub cost_h: f64,
    pub drift_plus_penalty: f64,
    pub slack: f64,
    pub lambda_l: f64,
    pub lagrangian: f64,
    pub reward_embb: RewardParts,
    pub reward_urllc: RewardParts,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeTrace {
    pub policy: PolicyKind,
    pub seed: u64,
    pub n_embb: usize,
    pub n_urllc: usize,
    pub records: Vec<SlotRecord>,
}

/// Derive an independent seed for episode `index` of a run seeded with `seed`.
pub fn episode_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One episode's mutable world.
pub struct Environment<'a> {
    cfg: &'a Config,
    book: &'a GainBook,
    budget: LinkBudget,
    labels: Vec<Slice>,
    rng_channel: SimRng,
    rng_arrivals: SimRng,
    rng_delays: SimRng,
    queues: SliceQueues,
    robots: Vec<RobotState>,
    windows: Vec<DiWindow>,
    references: Vec<ReferenceTrajectory>,
    prev_delays: Vec<f64>,
    prev_counts: (usize, usize),
    lagrangian: LagrangianState,
    control_steps: usize,
    channel: ChannelState,
}

impl<'a> Environment<'a> {
    pub fn new(cfg: &'a Config, book: &'a GainBook, seed: u64, horizon_slots: usize) -> Result<Self, SimError> {
        let net = &cfg.network;
        let dt = cfg.control.sampling_interval_s;
        let horizon_steps = (horizon_slots as f64 * cfg.sim.slot_duration_s / dt).ceil() as usize + 2;
        let mut rng_reference = stream(seed, Stream::Reference);
        let dim = book.plant.tracked.len();
        let references = (0..net.n_urllc)
            .map(|_| {
                make_reference(
                    cfg.control.reference,
                    horizon_steps,
                    dim,
                    dt,
                    cfg.control.reference_waypoints.as_deref(),
                    &mut rng_reference,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let robots = (0..net.n_urllc)
            .map(|_| RobotState::from_config(book.plant.clone(), book.nominal.gain.clone(), &cfg.control))
            .collect();
        let mut rng_channel = stream(seed, Stream::Channel);
        let channel = sample_channel(&mut rng_channel, net.n_users(), net.num_prbs, net.rayleigh_scale, 0);
        let half = net.num_prbs / 2;
        Ok(Self {
            cfg,
            book,
            budget: LinkBudget::from_config(net),
            labels: slice_labels(net.n_embb, net.n_urllc),
            rng_channel,
            rng_arrivals: stream(seed, Stream::Arrivals),
            rng_delays: stream(seed, Stream::Delays),
            queues: SliceQueues::new(net.n_embb, net.n_urllc),
            robots,
            windows: (0..net.n_urllc).map(|_| DiWindow::new(cfg.control.di_window)).collect(),
            references,
            prev_delays: vec![0.0; net.n_urllc],
            prev_counts: (half, net.num_prbs - half),
            lagrangian: LagrangianState::default(),
            control_steps: 0,
            channel,
        })
    }

    pub fn config(&self) -> &Config {
        self.cfg
    }

    /// Channel of the slot about to be decided.
    pub fn channel(&self) -> &ChannelState {
        &self.channel
    }

    pub fn queues(&self) -> &SliceQueues {
        &self.queues
    }

    pub fn labels(&self) -> &[Slice] {
        &self.labels
    }

    pub fn budget(&self) -> &LinkBudget {
        &self.budget
    }

    /// PRB counts `(eMBB, URLLC)` of the previous slot.
    pub fn prev_counts(&self) -> (usize, usize) {
        self.prev_counts
    }

    pub fn mean_di(&self) -> f64 {
        let n = self.windows.len().max(1) as f64;
        self.windows.iter().map(|w| w.di().value).sum::<f64>() / n
    }

    pub fn lagrangian(&self) -> &LagrangianState {
        &self.lagrangian
    }

    pub fn set_lambda(&mut self, lambda: f64) {
        self.lagrangian.lambda_l = lambda.max(0.0);
    }

    /// Projected multiplier ascent on the last slot's slack.
    pub fn ascend_multiplier(&mut self) {
        let slack = self.lagrangian.last_slack;
        self.lagrangian.ascend(slack, self.cfg.drl.lagrange_lr);
    }

    /// Execute one slot under `alloc`, then draw the next slot's channel.
    pub fn step(&mut self, alloc: &PrbAllocation) -> Result<SlotRecord, SimError> {
        let cfg = self.cfg;
        let net = &cfg.network;
        let qc = &cfg.queue;
        let tau = cfg.sim.slot_duration_s;
        let dt = cfg.control.sampling_interval_s;
        let slot = self.channel.slot_index;
        validate_allocation(alloc, net.n_users(), net.num_prbs)
            .map_err(|violation| SimError::Infeasible { slot, violation })?;
        let rates = compute_rates(&self.channel, alloc, &self.budget, &self.labels)?;
        let embb_rates: Vec<f64> = rates.of_slice(Slice::Embb).collect();
        let urllc_rates: Vec<f64> = rates.of_slice(Slice::Urllc).collect();

        let delays = sample_delays(&mut self.rng_delays, &urllc_rates, qc, net);
        let slot_end = (slot + 1) as f64 * tau;
        let mut delay_steps = Vec::with_capacity(net.n_urllc);
        let mut adjusted = Vec::with_capacity(net.n_urllc);
        let mut tracking_error = Vec::with_capacity(net.n_urllc);
        let mut di = Vec::with_capacity(net.n_urllc);
        let start_step = self.control_steps;
        let mut end_step = start_step;
        while (end_step + 1) as f64 * dt <= slot_end * (1.0 + 1e-12) {
            end_step += 1;
        }
        for (i, robot) in self.robots.iter_mut().enumerate() {
            let d = delays.delays[i];
            let steps = if d.is_finite() {
                ((d / dt) - 1e-9).ceil().max(0.0) as usize
            } else {
                usize::MAX
            }
            .min(robot.max_delay());
            robot.current_gain = self.book.gain_for(steps)?.clone();
            delay_steps.push(steps);
            adjusted.push(steps > self.book.nominal.max_delay);
            let mut acc = DiComponents::default();
            let mut last = None;
            for k in start_step..end_step {
                let c = robot.step(self.references[i].setpoint(k), steps)?;
                acc.tracking_error += c.tracking_error;
                acc.orientation_error_deg += c.orientation_error_deg;
                acc.curvature += c.curvature;
                last = Some(c);
            }
            let n = (end_step - start_step) as f64;
            if let Some(c) = last {
                self.windows[i].push(DiComponents {
                    tracking_error: acc.tracking_error / n,
                    orientation_error_deg: acc.orientation_error_deg / n,
                    curvature: acc.curvature / n,
                });
                tracking_error.push(c.tracking_error);
            } else {
                let sp = self.references[i].setpoint(start_step.saturating_sub(1));
                tracking_error.push((robot.position() - sp).norm());
            }
            di.push(self.windows[i].di().value);
        }
        self.control_steps = end_step;

        let service: Vec<f64> = urllc_rates
            .iter()
            .zip(&di)
            .map(|(&r, &d)| urllc_departure(r, d, qc).rate)
            .collect();
        let urllc_departures: Vec<f64> = service
            .iter()
            .map(|&r| packets_per_slot(r, tau, qc.urllc_packet_bytes))
            .collect();
        let urllc_arrivals: Vec<f64> = urllc_rates
            .iter()
            .zip(&self.prev_delays)
            .map(|(&r, &d)| {
                let window_delay = d.min(MAX_ARRIVAL_WINDOW_DELAY_S);
                sample_urllc_arrivals(&mut self.rng_arrivals, r, window_delay, tau, qc).count as f64
            })
            .collect();
        let embb_arrivals: Vec<f64> = (0..net.n_embb)
            .map(|_| sample_embb_arrivals(&mut self.rng_arrivals, tau, qc) as f64)
            .collect();
        let embb_departures: Vec<f64> = embb_rates
            .iter()
            .map(|&r| packets_per_slot(r, tau, qc.embb_packet_bytes))
            .collect();

        let prev = (self.queues.f(), self.queues.g());
        self.queues = step_queues(&self.queues, &urllc_arrivals, &urllc_departures, &embb_arrivals, &embb_departures);
        let next = (self.queues.f(), self.queues.g());

        let mbps = |v: &[f64]| v.iter().map(|r| r / 1e6).collect::<Vec<_>>();
        let h_embb = cost_h(&mbps(&embb_rates), qc.epsilon);
        let h_urllc = cost_h(&mbps(&urllc_rates), qc.epsilon);
        let h = h_embb + h_urllc;
        let dpp = drift_plus_penalty(prev, next, h, qc.penalty_weight);
        let slack = urllc_rates
            .iter()
            .map(|&r| configured_slack(r, qc, net))
            .fold(f64::INFINITY, f64::min);
        let lambda_l = self.lagrangian.lambda_l;
        let lagrangian = self.lagrangian.evaluate(dpp - qc.penalty_weight * h, qc.penalty_weight * h, slack);
        let (reward_embb, reward_urllc) = slot_rewards(prev, next, h_embb, h_urllc, slack, lambda_l, cfg);

        let counts = (
            alloc.prbs_in_slice(&self.labels, Slice::Embb),
            alloc.prbs_in_slice(&self.labels, Slice::Urllc),
        );
        self.prev_counts = counts;
        self.prev_delays = delays.delays.clone();
        self.channel = sample_channel(&mut self.rng_channel, net.n_users(), net.num_prbs, net.rayleigh_scale, slot + 1);

        Ok(SlotRecord {
            slot,
            prbs_embb: counts.0,
            prbs_urllc: counts.1,
            owners: alloc.owners().expect("validated allocation has one owner per PRB"),
            rates: rates.rates,
            f: next.0,
            g: next.1,
            urllc_backlog: self.queues.urllc.clone(),
            embb_backlog: self.queues.embb.clone(),
            urllc_arrivals,
            urllc_departures,
            embb_arrivals,
            embb_departures,
            urllc_service_rate: service,
            delays: delays.delays,
            violations: delays.violations,
            delay_steps,
            adjusted,
            di,
            tracking_error,
            cost_h: h,
            drift_plus_penalty: dpp,
            slack,
            lambda_l,
            lagrangian,
            reward_embb,
            reward_urllc,
        })
    }
}

/// How each slot's allocation is chosen during evaluation.
pub enum Policy<'p> {
    /// Frozen agents acting greedily.
    Drl(&'p TrainedAgents),
    Pf(PfState),
}

impl Policy<'_> {
    pub fn kind(&self) -> PolicyKind {
        match self {
            Policy::Drl(_) => PolicyKind::Drl,
            Policy::Pf(_) => PolicyKind::Pf,
        }
    }
}

/// Run `steps` slots from a fresh environment seeded with `seed`.
pub fn run_episode(
    policy: &mut Policy<'_>,
    cfg: &Config,
    book: &GainBook,
    seed: u64,
    steps: usize,
) -> Result<EpisodeTrace, SimError> {
    let mut env = Environment::new(cfg, book, seed, steps)?;
    let mut norm = ObsNormalizer::for_config(cfg);
    if let Policy::Drl(agents) = policy {
        env.set_lambda(agents.lambda_l);
        norm = agents.normalizer.clone();
    }
    let mut records = Vec::with_capacity(steps);
    let net = &cfg.network;
    for _ in 0..steps {
        let alloc = match policy {
            Policy::Drl(agents) => {
                let (e, u) = greedy_actions(agents, &env, &norm)?;
                coordinate_allocations(e, u, env.channel(), net.n_embb, net.n_urllc)?
            }
            Policy::Pf(state) => pf_allocate(env.channel(), state, env.budget()),
        };
        let rec = env.step(&alloc)?;
        if let Policy::Pf(state) = policy {
            state.update(&rec.rates);
        }
        env.ascend_multiplier();
        records.push(rec);
    }
    Ok(EpisodeTrace {
        policy: policy.kind(),
        seed,
        n_embb: net.n_embb,
        n_urllc: net.n_urllc,
        records,
    })
}

fn greedy_actions(
    agents: &TrainedAgents,
    env: &Environment<'_>,
    norm: &ObsNormalizer,
) -> Result<(AgentAction, AgentAction), SimError> {
    // greedy acting consumes no randomness; the stream only satisfies the signature
    let mut unused = stream(0, Stream::Policy);
    let e = agents.embb.act(&observe(env, Slice::Embb, norm), None, &mut unused)?;
    let u = agents.urllc.act(&observe(env, Slice::Urllc, norm), None, &mut unused)?;
    Ok((e, u))
}

/// Map `f` over `items` on up to `jobs` scoped threads, preserving order.
pub fn par_map<T, R, F>(jobs: usize, items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.into_iter().map(f).collect();
    }
    let n = items.len();
    let mut slots: Vec<Option<R>> = (0..n).map(|_| None).collect();
    let queue = std::sync::Mutex::new(items.into_iter().enumerate());
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let next = queue.lock().expect("queue lock").next();
                let Some((i, item)) = next else { break };
                let r = f(item);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every item mapped")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(sets: &[&str]) -> Config {
        Config::default().with_overrides(sets).unwrap()
    }

    #[test]
    fn pf_episode_is_well_formed() {
        let cfg = small_cfg(&["n_embb=2", "n_urllc=2"]);
        let book = GainBook::new(&cfg.control).unwrap();
        let trace = run_episode(&mut Policy::Pf(PfState::new(4, 100.0)), &cfg, &book, 1, 100).unwrap();
        assert_eq!(trace.records.len(), 100);
        for (i, r) in trace.records.iter().enumerate() {
            assert_eq!(r.slot, i as u64);
            assert_eq!(r.prbs_embb + r.prbs_urllc, 25);
            assert!(r.urllc_backlog.iter().chain(&r.embb_backlog).all(|&b| b >= 0.0));
        }
    }

    #[test]
    fn no_urllc_arrivals_keeps_f_at_zero() {
        let cfg = small_cfg(&["base_arrival_rate=0"]);
        let book = GainBook::new(&cfg.control).unwrap();
        let trace = run_episode(&mut Policy::Pf(PfState::new(6, 100.0)), &cfg, &book, 3, 100).unwrap();
        assert!(trace.records.iter().all(|r| r.f == 0.0));
    }

    #[test]
    fn episode_seeds_differ() {
        assert_ne!(episode_seed(7, 0), episode_seed(7, 1));
        assert_ne!(episode_seed(7, 0), episode_seed(8, 0));
        assert_eq!(episode_seed(7, 3), episode_seed(7, 3));
    }

    #[test]
    fn par_map_preserves_order() {
        let out = par_map(3, (0..50).collect(), |x: i32| x * x);
        assert_eq!(out, (0..50).map(|x| x * x).collect::<Vec<_>>());
    }
}
