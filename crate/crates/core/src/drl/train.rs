//! The training loop, observations, rewards and checkpoints.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::agent::{Agent, AgentSnapshot};
use super::replay::Transition;
use super::{coordinate_allocations, DrlError, OBS_DIM};
use crate::channel::Slice;
use crate::config::Config;
use crate::control::GainBook;
use crate::objective::lyapunov;
use crate::rng::{stream, Stream};
use crate::sim::{episode_seed, Environment, SimError};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Slots of backlog history behind the running percentile.
const NORMALIZER_HISTORY: usize = 5_000;
const NORMALIZER_QUANTILE: f64 = 0.95;

/// One slice's reward and the terms it was built from.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardParts {
    /// Change in the slice's share of the Lyapunov function.
    pub drift: f64,
    /// The slice's cost term, unweighted.
    pub cost: f64,
    /// Delay slack; always 0 for eMBB.
    pub slack: f64,
    pub lambda_l: f64,
    pub value: f64,
}

impl RewardParts {
    pub fn new(drift: f64, cost: f64, slack: f64, lambda_l: f64, cfg: &Config) -> Self {
        let mut p = Self {
            drift,
            cost,
            slack,
            lambda_l,
            value: 0.0,
        };
        p.value = p.recompute(cfg);
        p
    }

    /// Reward implied by the stored terms.
    pub fn recompute(&self, cfg: &Config) -> f64 {
        let raw = self.drift + cfg.queue.penalty_weight * self.cost - self.lambda_l * self.slack;
        let clip = cfg.drl.reward_clip;
        (-cfg.drl.reward_scale * raw).clamp(-clip, clip)
    }
}

/// Per-slice rewards for one slot. `prev`/`next` are `(F, G)`.
pub fn slot_rewards(
    prev: (f64, f64),
    next: (f64, f64),
    h_embb: f64,
    h_urllc: f64,
    slack: f64,
    lambda_l: f64,
    cfg: &Config,
) -> (RewardParts, RewardParts) {
    let embb_drift = lyapunov(0.0, next.1) - lyapunov(0.0, prev.1);
    let urllc_drift = lyapunov(next.0, 0.0) - lyapunov(prev.0, 0.0);
    (
        RewardParts::new(embb_drift, h_embb, 0.0, lambda_l, cfg),
        RewardParts::new(urllc_drift, h_urllc, slack, lambda_l, cfg),
    )
}

/// Scales for the observation features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsNormalizer {
    pub urllc_backlog: f64,
    pub embb_backlog: f64,
    /// Mean Rayleigh amplitude at the configured scale.
    pub gain: f64,
}

impl ObsNormalizer {
    /// Initial scales from one slot's worth of expected arrivals.
    pub fn for_config(cfg: &Config) -> Self {
        let net = &cfg.network;
        let tau = cfg.sim.slot_duration_s;
        Self {
            urllc_backlog: (cfg.queue.base_arrival_rate * tau * net.n_urllc as f64).max(1.0),
            embb_backlog: (cfg.queue.embb_arrival_rate * tau * net.n_embb as f64).max(1.0),
            gain: net.rayleigh_scale * (std::f64::consts::PI / 2.0).sqrt(),
        }
    }

    fn refresh(&mut self, f_hist: &VecDeque<f64>, g_hist: &VecDeque<f64>) {
        let q = |h: &VecDeque<f64>| {
            let mut v: Vec<f64> = h.iter().copied().collect();
            v.sort_by(f64::total_cmp);
            let i = ((v.len() as f64 - 1.0) * NORMALIZER_QUANTILE).round() as usize;
            v.get(i).copied().unwrap_or(0.0).max(1.0)
        };
        self.urllc_backlog = q(f_hist);
        self.embb_backlog = q(g_hist);
    }
}

/// Observation of `slice`'s agent before the current slot's decision.
pub fn observe(env: &Environment<'_>, slice: Slice, norm: &ObsNormalizer) -> [f64; OBS_DIM] {
    let cfg = env.config();
    let k = cfg.network.num_prbs as f64;
    let q = env.queues();
    let (f, g) = (q.f() / norm.urllc_backlog, q.g() / norm.embb_backlog);
    let ch = env.channel();
    let users: Vec<usize> = env
        .labels()
        .iter()
        .enumerate()
        .filter(|(_, &s)| s == slice)
        .map(|(i, _)| i)
        .collect();
    let mean_gain = users.iter().map(|&i| ch.gains.row(i).mean().unwrap_or(0.0)).sum::<f64>()
        / users.len().max(1) as f64
        / norm.gain;
    let (pe, pu) = env.prev_counts();
    let lambda = env.lagrangian().lambda_l;
    match slice {
        Slice::Embb => [g, f, mean_gain, pe as f64 / k, 0.0, lambda],
        Slice::Urllc => [f, g, mean_gain, pu as f64 / k, env.mean_di(), lambda],
    }
}

/// One row of the learning curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LearningCurveRow {
    pub episode: usize,
    pub reward_embb: f64,
    pub reward_urllc: f64,
    #[serde(rename = "F_mean")]
    pub f_mean: f64,
    #[serde(rename = "G_mean")]
    pub g_mean: f64,
    pub lambda_l: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedAgents {
    pub embb: Agent,
    pub urllc: Agent,
    pub lambda_l: f64,
    pub normalizer: ObsNormalizer,
    pub curve: Vec<LearningCurveRow>,
}

impl TrainedAgents {
    pub fn checkpoint(&self, cfg: &Config) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: cfg.hash(),
            seed: cfg.drl.seed,
            episodes: self.curve.len(),
            lambda_l: self.lambda_l,
            normalizer: self.normalizer.clone(),
            embb: self.embb.snapshot(),
            urllc: self.urllc.snapshot(),
        }
    }

    pub fn from_checkpoint(c: &Checkpoint, cfg: &Config) -> Result<Self, DrlError> {
        if c.version != CHECKPOINT_VERSION {
            return Err(DrlError::Checkpoint(format!(
                "version {} (expected {CHECKPOINT_VERSION})",
                c.version
            )));
        }
        let embb = Agent::from_snapshot(&c.embb, &cfg.drl)?;
        let urllc = Agent::from_snapshot(&c.urllc, &cfg.drl)?;
        let want = cfg.network.num_prbs - 1;
        if embb.n_actions() != want || urllc.n_actions() != want {
            return Err(DrlError::Checkpoint(format!(
                "actors have {} and {} actions, config needs {want}",
                embb.n_actions(),
                urllc.n_actions()
            )));
        }
        if embb.slice != Slice::Embb || urllc.slice != Slice::Urllc {
            return Err(DrlError::Checkpoint("agent slices swapped".into()));
        }
        Ok(Self {
            embb,
            urllc,
            lambda_l: c.lambda_l,
            normalizer: c.normalizer.clone(),
            curve: Vec::new(),
        })
    }
}

/// Frozen policy state on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub episodes: usize,
    pub lambda_l: f64,
    pub normalizer: ObsNormalizer,
    pub embb: AgentSnapshot,
    pub urllc: AgentSnapshot,
}

fn epsilon_at(episode: usize, cfg: &Config) -> f64 {
    let d = &cfg.drl;
    let span = (d.epsilon_decay_fraction * d.episodes as f64).max(1.0);
    let t = (episode as f64 / span).min(1.0);
    d.epsilon_start + (d.epsilon_end - d.epsilon_start) * t
}

/// Train both agents for `cfg.drl.episodes` episodes. `on_episode` sees each
/// learning-curve row as it is produced.
pub fn train(
    cfg: &Config,
    book: &GainBook,
    mut on_episode: impl FnMut(&LearningCurveRow),
) -> Result<TrainedAgents, SimError> {
    let d = &cfg.drl;
    let seed = d.seed;
    let n_actions = cfg.network.num_prbs - 1;
    let mut init = stream(seed, Stream::Init);
    let mut embb = Agent::new(Slice::Embb, n_actions, d, &mut init);
    let mut urllc = Agent::new(Slice::Urllc, n_actions, d, &mut init);
    let mut policy_rng = stream(seed, Stream::Policy);
    let mut replay_rng = stream(seed, Stream::Replay);
    let mut norm = ObsNormalizer::for_config(cfg);
    let mut f_hist = VecDeque::with_capacity(NORMALIZER_HISTORY);
    let mut g_hist = VecDeque::with_capacity(NORMALIZER_HISTORY);
    let mut lambda_l = 0.0;
    let mut curve = Vec::with_capacity(d.episodes);
    let steps = d.steps_per_episode;

    for episode in 0..d.episodes {
        let eps = epsilon_at(episode, cfg);
        let mut env = Environment::new(cfg, book, episode_seed(seed, episode as u64), steps)?;
        env.set_lambda(lambda_l);
        let (mut re, mut ru, mut fs, mut gs) = (0.0, 0.0, 0.0, 0.0);
        let mut s_e = observe(&env, Slice::Embb, &norm);
        let mut s_u = observe(&env, Slice::Urllc, &norm);
        for _ in 0..steps {
            let a_e = embb.act(&s_e, Some(eps), &mut policy_rng)?;
            let a_u = urllc.act(&s_u, Some(eps), &mut policy_rng)?;
            let alloc = coordinate_allocations(a_e, a_u, env.channel(), cfg.network.n_embb, cfg.network.n_urllc)?;
            let rec = env.step(&alloc)?;
            let s2_e = observe(&env, Slice::Embb, &norm);
            let s2_u = observe(&env, Slice::Urllc, &norm);
            embb.replay.push(Transition {
                s: s_e,
                a: a_e.index(),
                r: rec.reward_embb.value,
                s2: s2_e,
            });
            urllc.replay.push(Transition {
                s: s_u,
                a: a_u.index(),
                r: rec.reward_urllc.value,
                s2: s2_u,
            });
            if embb.replay.len() >= d.batch_size {
                let batch = embb.replay.sample(d.batch_size, &mut replay_rng);
                embb.update(&batch)?;
            }
            if urllc.replay.len() >= d.batch_size {
                let batch = urllc.replay.sample(d.batch_size, &mut replay_rng);
                urllc.update(&batch)?;
            }
            env.ascend_multiplier();
            re += rec.reward_embb.value;
            ru += rec.reward_urllc.value;
            fs += rec.f;
            gs += rec.g;
            for (h, v) in [(&mut f_hist, rec.f), (&mut g_hist, rec.g)] {
                if h.len() == NORMALIZER_HISTORY {
                    h.pop_front();
                }
                h.push_back(v);
            }
            s_e = s2_e;
            s_u = s2_u;
        }
        lambda_l = env.lagrangian().lambda_l;
        norm.refresh(&f_hist, &g_hist);
        let n = steps.max(1) as f64;
        let row = LearningCurveRow {
            episode,
            reward_embb: re,
            reward_urllc: ru,
            f_mean: fs / n,
            g_mean: gs / n,
            lambda_l,
        };
        on_episode(&row);
        curve.push(row);
    }
    Ok(TrainedAgents {
        embb,
        urllc,
        lambda_l,
        normalizer: norm,
        curve,
    })
}
