//! Dual-agent actor-critic: one agent per slice bids for PRBs, a coordinator
//! turns the two bids into a feasible allocation.

pub mod agent;
pub mod nn;
pub mod replay;
pub mod train;

use serde::Serialize;
use thiserror::Error;

use crate::channel::{ChannelState, PrbAllocation, Slice};

pub use agent::{Agent, AgentSnapshot, UpdateStats};
pub use replay::{ReplayBuffer, Transition};
pub use train::{train, Checkpoint, LearningCurveRow, TrainedAgents};

/// Observation width: own backlog, other backlog, own mean gain, own previous
/// PRB share, mean DI (URLLC only), multiplier.
pub const OBS_DIM: usize = 6;

#[derive(Debug, Error)]
pub enum DrlError {
    #[error("{slice} actor produced a non-finite output")]
    NonFiniteOutput { slice: Slice, params: Box<nn::MlpSnapshot> },
    #[error("{slice} update produced a non-finite loss")]
    NonFiniteLoss { slice: Slice, batch: Box<Vec<Transition>> },
    #[error("slice demands cannot cover the users: {0}")]
    Infeasible(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

/// PRBs requested by one agent, in `1..=K-1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AgentAction {
    pub prb_demand: usize,
}

impl AgentAction {
    pub fn from_index(i: usize) -> Self {
        Self { prb_demand: i + 1 }
    }

    pub fn index(&self) -> usize {
        self.prb_demand - 1
    }
}

/// Split K PRBs between the slices in proportion to their demands.
/// Largest-remainder rounding; an exact tie in the remainders goes to URLLC.
/// Each slice is then raised to at least its user count.
pub fn slice_counts(
    d_embb: usize,
    d_urllc: usize,
    k: usize,
    n_embb: usize,
    n_urllc: usize,
) -> Result<(usize, usize), DrlError> {
    if n_embb + n_urllc > k {
        return Err(DrlError::Infeasible(format!(
            "{} users exceed {k} PRBs",
            n_embb + n_urllc
        )));
    }
    let total = (d_embb + d_urllc).max(1);
    let (qe, re) = ((d_embb * k) / total, (d_embb * k) % total);
    let (qu, ru) = ((d_urllc * k) / total, (d_urllc * k) % total);
    let (mut e, mut u) = (qe, qu);
    // the two remainders sum to 0 or `total`, so at most one PRB is left over
    if e + u < k {
        if re > ru {
            e += 1;
        } else {
            u += 1;
        }
    }
    if e < n_embb {
        e = n_embb;
        u = k - e;
    }
    if u < n_urllc {
        u = n_urllc;
        e = k - u;
    }
    Ok((e, u))
}

/// Allocate PRBs `0..e` to eMBB users and the rest to URLLC users. Inside a
/// slice each user first takes its best remaining PRB, then every leftover
/// PRB goes to the user with the strongest gain on it.
pub fn coordinate_allocations(
    embb: AgentAction,
    urllc: AgentAction,
    ch: &ChannelState,
    n_embb: usize,
    n_urllc: usize,
) -> Result<PrbAllocation, DrlError> {
    let k = ch.num_prbs();
    let (e, _) = slice_counts(embb.prb_demand, urllc.prb_demand, k, n_embb, n_urllc)?;
    let mut owners = vec![usize::MAX; k];
    assign_within(ch, &(0..n_embb).collect::<Vec<_>>(), &(0..e).collect::<Vec<_>>(), &mut owners);
    assign_within(
        ch,
        &(n_embb..n_embb + n_urllc).collect::<Vec<_>>(),
        &(e..k).collect::<Vec<_>>(),
        &mut owners,
    );
    Ok(PrbAllocation::from_owners(n_embb + n_urllc, &owners))
}

fn assign_within(ch: &ChannelState, users: &[usize], prbs: &[usize], owners: &mut [usize]) {
    let best = |cands: &mut dyn Iterator<Item = usize>, score: &dyn Fn(usize) -> f64| {
        cands.fold(None, |acc: Option<usize>, c| match acc {
            Some(b) if score(b) >= score(c) => Some(b),
            _ => Some(c),
        })
    };
    for &u in users {
        let free = &mut prbs.iter().copied().filter(|&j| owners[j] == usize::MAX);
        if let Some(j) = best(free, &|j| ch.gains[[u, j]]) {
            owners[j] = u;
        }
    }
    for &j in prbs {
        if owners[j] == usize::MAX {
            owners[j] = best(&mut users.iter().copied(), &|u| ch.gains[[u, j]]).expect("slice has users");
        }
    }
}
