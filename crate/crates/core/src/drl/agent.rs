use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nn::{clip_grads, softmax_rows, Adam, Grads, Mlp, MlpSnapshot};
use super::replay::{ReplayBuffer, Transition};
use super::{AgentAction, DrlError, OBS_DIM};
use crate::channel::Slice;
use crate::config::DrlConfig;

/// Actor-critic pair for one slice.
#[derive(Debug, Clone)]
pub struct Agent {
    pub slice: Slice,
    pub actor: Mlp,
    pub critic: Mlp,
    actor_opt: Adam,
    critic_opt: Adam,
    pub replay: ReplayBuffer,
    cfg: DrlConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    /// Mean of the raw (unnormalized) advantages.
    pub mean_advantage: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSnapshot {
    pub slice: String,
    pub actor: MlpSnapshot,
    pub critic: MlpSnapshot,
}

fn obs_matrix<'a>(rows: impl ExactSizeIterator<Item = &'a [f64; OBS_DIM]>) -> Array2<f64> {
    let n = rows.len();
    let flat: Vec<f64> = rows.flat_map(|r| r.iter().copied()).collect();
    Array2::from_shape_vec((n, OBS_DIM), flat).expect("rows have OBS_DIM entries")
}

/// Policy-gradient loss `-mean(adv * log pi(a|s)) - c * mean(H(pi(.|s)))` and its gradients.
pub fn actor_loss_and_grads(
    actor: &Mlp,
    states: &Array2<f64>,
    actions: &[usize],
    advantages: &[f64],
    entropy_coef: f64,
) -> (f64, f64, Grads) {
    let (logits, cache) = actor.forward(states);
    let probs = softmax_rows(&logits);
    let b = states.nrows() as f64;
    let mut dlogits = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    let mut entropy = 0.0;
    for (i, row) in probs.rows().into_iter().enumerate() {
        let logp: Vec<f64> = row.iter().map(|p| p.max(1e-300).ln()).collect();
        let h: f64 = -row.iter().zip(&logp).map(|(p, l)| p * l).sum::<f64>();
        entropy += h;
        loss -= advantages[i] * logp[actions[i]] + entropy_coef * h;
        for (k, &p) in row.iter().enumerate() {
            let onehot = if k == actions[i] { 1.0 } else { 0.0 };
            dlogits[[i, k]] = (-advantages[i] * (onehot - p) + entropy_coef * p * (logp[k] + h)) / b;
        }
    }
    let grads = actor.backward(&cache, &dlogits);
    (loss / b, entropy / b, grads)
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(slice: Slice, n_actions: usize, cfg: &DrlConfig, rng: &mut R) -> Self {
        let mut sizes = vec![OBS_DIM];
        sizes.extend(&cfg.hidden_sizes);
        let mut actor_sizes = sizes.clone();
        actor_sizes.push(n_actions);
        sizes.push(1);
        let actor = Mlp::new(&actor_sizes, 0.01, rng);
        let critic = Mlp::new(&sizes, 1.0, rng);
        Self {
            slice,
            actor_opt: Adam::new(&actor, cfg.actor_lr),
            critic_opt: Adam::new(&critic, cfg.critic_lr),
            actor,
            critic,
            replay: ReplayBuffer::new(cfg.replay_capacity),
            cfg: cfg.clone(),
        }
    }

    pub fn n_actions(&self) -> usize {
        self.actor.sizes().last().copied().unwrap_or(0)
    }

    pub fn logits(&self, obs: &[f64; OBS_DIM]) -> Array1<f64> {
        self.actor.predict(&obs_matrix(std::iter::once(obs))).row(0).to_owned()
    }

    /// With `epsilon = Some(e)`: uniform action with probability `e`, else a
    /// draw from the softmax policy. With `None`: greedy, lowest index on ties.
    pub fn act<R: Rng + ?Sized>(
        &self,
        obs: &[f64; OBS_DIM],
        epsilon: Option<f64>,
        rng: &mut R,
    ) -> Result<AgentAction, DrlError> {
        let logits = self.logits(obs);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(DrlError::NonFiniteOutput {
                slice: self.slice,
                params: Box::new(self.actor.snapshot()),
            });
        }
        let index = match epsilon {
            None => logits
                .iter()
                .enumerate()
                .fold(0, |best, (i, &z)| if z > logits[best] { i } else { best }),
            Some(e) => {
                if rng.random::<f64>() < e {
                    rng.random_range(0..logits.len())
                } else {
                    let probs = softmax_rows(&logits.insert_axis(ndarray::Axis(0)));
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut pick = probs.ncols() - 1;
                    for (i, &p) in probs.row(0).iter().enumerate() {
                        acc += p;
                        if u < acc {
                            pick = i;
                            break;
                        }
                    }
                    pick
                }
            }
        };
        Ok(AgentAction::from_index(index))
    }

    pub fn value(&self, obs: &[f64; OBS_DIM]) -> f64 {
        self.critic.predict(&obs_matrix(std::iter::once(obs)))[[0, 0]]
    }

    /// One critic and actor step on `batch`.
    pub fn update(&mut self, batch: &[Transition]) -> Result<UpdateStats, DrlError> {
        let s = obs_matrix(batch.iter().map(|t| &t.s));
        let s2 = obs_matrix(batch.iter().map(|t| &t.s2));
        let b = batch.len() as f64;

        let next_v = self.critic.predict(&s2);
        let targets: Vec<f64> = batch
            .iter()
            .zip(next_v.column(0))
            .map(|(t, &v)| t.r + self.cfg.discount * v)
            .collect();
        let (v, cache) = self.critic.forward(&s);
        let advantages: Vec<f64> = targets.iter().zip(v.column(0)).map(|(y, v)| y - v).collect();
        let critic_loss = advantages.iter().map(|a| a * a).sum::<f64>() / b;
        let mean_advantage = advantages.iter().sum::<f64>() / b;
        if !critic_loss.is_finite() {
            return Err(DrlError::NonFiniteLoss {
                slice: self.slice,
                batch: Box::new(batch.to_vec()),
            });
        }
        let dv = Array2::from_shape_fn((batch.len(), 1), |(i, _)| -2.0 * advantages[i] / b);
        let mut cg = self.critic.backward(&cache, &dv);
        clip_grads(&mut cg, self.cfg.grad_clip);
        self.critic_opt.step(&mut self.critic, &cg);

        let std = (advantages.iter().map(|a| (a - mean_advantage).powi(2)).sum::<f64>() / b).sqrt();
        let normalized: Vec<f64> = advantages
            .iter()
            .map(|a| (a - mean_advantage) / (std + 1e-8))
            .collect();
        let actions: Vec<usize> = batch.iter().map(|t| t.a).collect();
        let (actor_loss, entropy, mut ag) =
            actor_loss_and_grads(&self.actor, &s, &actions, &normalized, self.cfg.entropy_coef);
        if !actor_loss.is_finite() {
            return Err(DrlError::NonFiniteLoss {
                slice: self.slice,
                batch: Box::new(batch.to_vec()),
            });
        }
        clip_grads(&mut ag, self.cfg.grad_clip);
        self.actor_opt.step(&mut self.actor, &ag);
        Ok(UpdateStats {
            critic_loss,
            actor_loss,
            mean_advantage,
            entropy,
        })
    }

    pub fn snapshot(&self) -> AgentSnapshot {
        AgentSnapshot {
            slice: self.slice.to_string(),
            actor: self.actor.snapshot(),
            critic: self.critic.snapshot(),
        }
    }

    /// Rebuild a frozen agent (fresh optimizer and empty replay) from a snapshot.
    pub fn from_snapshot(s: &AgentSnapshot, cfg: &DrlConfig) -> Result<Self, DrlError> {
        let slice = match s.slice.as_str() {
            "embb" => Slice::Embb,
            "urllc" => Slice::Urllc,
            other => return Err(DrlError::Checkpoint(format!("unknown slice `{other}`"))),
        };
        let actor = Mlp::from_snapshot(&s.actor).map_err(DrlError::Checkpoint)?;
        let critic = Mlp::from_snapshot(&s.critic).map_err(DrlError::Checkpoint)?;
        if actor.sizes()[0] != OBS_DIM || critic.sizes()[0] != OBS_DIM {
            return Err(DrlError::Checkpoint("observation width mismatch".into()));
        }
        Ok(Self {
            slice,
            actor_opt: Adam::new(&actor, cfg.actor_lr),
            critic_opt: Adam::new(&critic, cfg.critic_lr),
            actor,
            critic,
            replay: ReplayBuffer::new(cfg.replay_capacity),
            cfg: cfg.clone(),
        })
    }
}
