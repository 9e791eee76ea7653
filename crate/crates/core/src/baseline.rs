//! Per-PRB proportional-fair scheduling.

use crate::channel::{ChannelState, LinkBudget, PrbAllocation};

/// Lower bound on the averaged throughput, bits/s.
pub const EWMA_FLOOR: f64 = 1e3;

#[derive(Debug, Clone, PartialEq)]
pub struct PfState {
    pub ewma_rate: Vec<f64>,
    /// Weight of the newest slot in the average, `1 / t_c`.
    pub smoothing: f64,
}

impl PfState {
    pub fn new(n_users: usize, time_constant: f64) -> Self {
        Self {
            ewma_rate: vec![EWMA_FLOOR; n_users],
            smoothing: 1.0 / time_constant,
        }
    }

    /// Fold one slot of served rates into the averages.
    pub fn update(&mut self, rates: &[f64]) {
        for (avg, &r) in self.ewma_rate.iter_mut().zip(rates) {
            *avg = ((1.0 - self.smoothing) * *avg + self.smoothing * r).max(EWMA_FLOOR);
        }
    }
}

/// Give each PRB to the user with the best instantaneous-to-average rate
/// ratio, then hand starved users the surplus PRBs whose current owner
/// values them least. Does not update the averages.
pub fn pf_allocate(ch: &ChannelState, state: &PfState, budget: &LinkBudget) -> PrbAllocation {
    let n = ch.n_users();
    let k = ch.num_prbs();
    let ratio = |i: usize, j: usize| budget.prb_rate(ch.gains[[i, j]]) / state.ewma_rate[i];
    let mut owners: Vec<usize> = (0..k)
        .map(|j| {
            (0..n).fold(0, |best, i| if ratio(i, j) > ratio(best, j) { i } else { best })
        })
        .collect();
    let mut counts = vec![0usize; n];
    for &o in &owners {
        counts[o] += 1;
    }
    for user in 0..n {
        if counts[user] > 0 {
            continue;
        }
        let j = (0..k)
            .filter(|&j| counts[owners[j]] > 1)
            .min_by(|&a, &b| ratio(owners[a], a).total_cmp(&ratio(owners[b], b)))
            .expect("K >= n_users leaves a surplus PRB while a user is starved");
        counts[owners[j]] -= 1;
        owners[j] = user;
        counts[user] = 1;
    }
    PrbAllocation::from_owners(n, &owners)
}
