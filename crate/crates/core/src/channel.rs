//! Rayleigh block fading and per-user Shannon rates over allocated PRBs.

use ndarray::Array2;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::config::NetworkConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Slice {
    Embb,
    Urllc,
}

impl std::fmt::Display for Slice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Slice::Embb => "embb",
            Slice::Urllc => "urllc",
        })
    }
}

/// Users are laid out eMBB first, then URLLC.
pub fn slice_labels(n_embb: usize, n_urllc: usize) -> Vec<Slice> {
    let mut v = vec![Slice::Embb; n_embb];
    v.extend(std::iter::repeat_n(Slice::Urllc, n_urllc));
    v
}

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("shape mismatch: gains are {gains:?}, allocation is {alloc:?}")]
    ShapeMismatch {
        gains: (usize, usize),
        alloc: (usize, usize),
    },
    #[error("infeasible allocation: {0}")]
    Infeasible(AllocationViolation),
}

/// Which resource-allocation constraint an allocation breaks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum AllocationViolation {
    Shape {
        expected: (usize, usize),
        found: (usize, usize),
    },
    /// Total assigned PRBs differ from K.
    Total { assigned: usize, k: usize },
    /// A PRB is owned by zero or several users.
    PrbOwnership { prb: usize, owners: usize },
    /// A user holds no PRB.
    StarvedUser { user: usize },
}

impl std::fmt::Display for AllocationViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Shape { expected, found } => {
                write!(f, "allocation shape {found:?}, expected {expected:?}")
            }
            Self::Total { assigned, k } => write!(f, "8b: {assigned} PRBs assigned, K = {k}"),
            Self::PrbOwnership { prb, owners } => {
                write!(f, "8c: PRB {prb} has {owners} owners")
            }
            Self::StarvedUser { user } => write!(f, "8d: user {user} has no PRB"),
        }
    }
}

/// Per-slot Rayleigh amplitudes `h[user, prb]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelState {
    pub gains: Array2<f64>,
    pub slot_index: u64,
}

impl ChannelState {
    pub fn n_users(&self) -> usize {
        self.gains.nrows()
    }

    pub fn num_prbs(&self) -> usize {
        self.gains.ncols()
    }
}

/// Binary PRB-to-user assignment `rho[user, prb]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrbAllocation {
    pub assign: Array2<bool>,
}

impl PrbAllocation {
    /// Build from the owner of each PRB.
    pub fn from_owners(n_users: usize, owners: &[usize]) -> Self {
        let mut assign = Array2::from_elem((n_users, owners.len()), false);
        for (j, &u) in owners.iter().enumerate() {
            assign[[u, j]] = true;
        }
        Self { assign }
    }

    /// Owner of each PRB, if every PRB has exactly one.
    pub fn owners(&self) -> Option<Vec<usize>> {
        self.assign
            .columns()
            .into_iter()
            .map(|col| {
                let mut it = col.iter().enumerate().filter(|(_, &b)| b);
                match (it.next(), it.next()) {
                    (Some((i, _)), None) => Some(i),
                    _ => None,
                }
            })
            .collect()
    }

    pub fn prbs_per_user(&self) -> Vec<usize> {
        self.assign
            .rows()
            .into_iter()
            .map(|r| r.iter().filter(|&&b| b).count())
            .collect()
    }

    pub fn prbs_in_slice(&self, labels: &[Slice], slice: Slice) -> usize {
        self.prbs_per_user()
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == slice)
            .map(|(n, _)| n)
            .sum()
    }
}

/// Per-user rates in bits/s.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateVector {
    pub rates: Vec<f64>,
    pub slices: Vec<Slice>,
}

impl RateVector {
    pub fn of_slice(&self, slice: Slice) -> impl Iterator<Item = f64> + '_ {
        self.rates
            .iter()
            .zip(&self.slices)
            .filter(move |(_, &s)| s == slice)
            .map(|(&r, _)| r)
    }
}

/// Linear-scale link constants derived once from the dBm configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkBudget {
    pub bandwidth_per_prb: f64,
    /// Transmit power over noise power, watts/watts.
    pub snr_per_unit_gain: f64,
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

impl LinkBudget {
    pub fn from_config(cfg: &NetworkConfig) -> Self {
        Self {
            bandwidth_per_prb: cfg.bandwidth_per_prb(),
            snr_per_unit_gain: dbm_to_watts(cfg.transmit_power_dbm)
                / dbm_to_watts(cfg.noise_variance_dbm),
        }
    }

    /// Rate of a single PRB with amplitude `h`.
    #[inline]
    pub fn prb_rate(&self, h: f64) -> f64 {
        self.bandwidth_per_prb * (self.snr_per_unit_gain * h * h).ln_1p() / std::f64::consts::LN_2
    }
}

/// Rayleigh amplitude from a uniform draw in (0, 1] by inverse CDF.
#[inline]
pub fn rayleigh_from_uniform(u: f64, scale: f64) -> f64 {
    scale * (-2.0 * u.ln()).sqrt()
}

/// Draw i.i.d. Rayleigh(`scale`) gains. The draws are made by inverse CDF, so
/// two calls with the same RNG state and different scales give gains that
/// differ only by the scale factor.
pub fn sample_channel<R: Rng + ?Sized>(
    rng: &mut R,
    n_users: usize,
    k: usize,
    scale: f64,
    slot_index: u64,
) -> ChannelState {
    let gains = Array2::from_shape_simple_fn((n_users, k), || {
        // 1 - U lies in (0, 1], keeping ln finite.
        let u = 1.0 - rng.random::<f64>();
        rayleigh_from_uniform(u, scale)
    });
    ChannelState { gains, slot_index }
}

/// Check the PRB-allocation constraints: total K, one owner per PRB, no starved user.
pub fn validate_allocation(
    alloc: &PrbAllocation,
    n_users: usize,
    k: usize,
) -> Result<(), AllocationViolation> {
    let found = alloc.assign.dim();
    if found != (n_users, k) {
        return Err(AllocationViolation::Shape {
            expected: (n_users, k),
            found,
        });
    }
    let assigned = alloc.assign.iter().filter(|&&b| b).count();
    if assigned != k {
        return Err(AllocationViolation::Total { assigned, k });
    }
    for (prb, col) in alloc.assign.columns().into_iter().enumerate() {
        let owners = col.iter().filter(|&&b| b).count();
        if owners != 1 {
            return Err(AllocationViolation::PrbOwnership { prb, owners });
        }
    }
    if let Some(user) = alloc.prbs_per_user().iter().position(|&n| n == 0) {
        return Err(AllocationViolation::StarvedUser { user });
    }
    Ok(())
}

/// Per-user rate: bandwidth per PRB times the sum of allocated spectral efficiencies.
pub fn compute_rates(
    ch: &ChannelState,
    alloc: &PrbAllocation,
    budget: &LinkBudget,
    slices: &[Slice],
) -> Result<RateVector, ChannelError> {
    if ch.gains.dim() != alloc.assign.dim() || slices.len() != ch.n_users() {
        return Err(ChannelError::ShapeMismatch {
            gains: ch.gains.dim(),
            alloc: alloc.assign.dim(),
        });
    }
    validate_allocation(alloc, ch.n_users(), ch.num_prbs()).map_err(ChannelError::Infeasible)?;
    Ok(RateVector {
        rates: per_user_rates(ch, alloc, budget),
        slices: slices.to_vec(),
    })
}

/// Rates without the feasibility precondition, for what-if evaluation.
pub(crate) fn per_user_rates(ch: &ChannelState, alloc: &PrbAllocation, budget: &LinkBudget) -> Vec<f64> {
    ch.gains
        .rows()
        .into_iter()
        .zip(alloc.assign.rows())
        .map(|(h, rho)| {
            h.iter()
                .zip(rho.iter())
                .filter(|(_, &on)| on)
                .map(|(&g, _)| budget.prb_rate(g))
                .sum()
        })
        .collect()
}
