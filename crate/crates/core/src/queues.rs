//! Per-user slice queues: rate-sensitive URLLC arrivals, DI-penalized
//! service, and the projected backlog recursions.
//!
//! Backlogs are counted in packets. Rates enter in bits/s and are converted
//! with a fixed packet size per slice.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::Serialize;

use crate::config::QueueConfig;

/// Backlog per user, in packets.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SliceQueues {
    pub urllc: Vec<f64>,
    pub embb: Vec<f64>,
    pub slot_index: u64,
}

impl SliceQueues {
    pub fn new(n_embb: usize, n_urllc: usize) -> Self {
        Self {
            urllc: vec![0.0; n_urllc],
            embb: vec![0.0; n_embb],
            slot_index: 0,
        }
    }

    /// Slice-summed URLLC backlog.
    pub fn f(&self) -> f64 {
        self.urllc.iter().sum()
    }

    /// Slice-summed eMBB backlog.
    pub fn g(&self) -> f64 {
        self.embb.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ArrivalSample {
    pub count: u64,
    /// Packets/s after the rate adjustment, never negative.
    pub effective_rate: f64,
    /// Observation window in seconds (slot plus the user's last delay).
    pub window: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ServiceSample {
    /// Bits/s left for URLLC service after the dexterity penalty.
    pub rate: f64,
}

/// Poisson(`rate * window`) mass at `k`, evaluated in log-space.
pub fn arrival_pmf(k: u64, rate: f64, window: f64) -> f64 {
    let mean = rate * window;
    if mean <= 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    (k as f64 * mean.ln() - mean - ln_factorial(k)).exp()
}

fn ln_factorial(k: u64) -> f64 {
    (2..=k).map(|i| (i as f64).ln()).sum()
}

/// `max(0, base - sensitivity * r)` with `r` in Mbps.
pub fn effective_arrival_rate(rate_bits_per_s: f64, cfg: &QueueConfig) -> f64 {
    (cfg.base_arrival_rate - cfg.arrival_sensitivity * rate_bits_per_s / 1e6).max(0.0)
}

/// Draw URLLC command arrivals over one slot plus the previous delay.
pub fn sample_urllc_arrivals<R: Rng + ?Sized>(
    rng: &mut R,
    rate_bits_per_s: f64,
    delay_s: f64,
    slot_s: f64,
    cfg: &QueueConfig,
) -> ArrivalSample {
    let effective_rate = effective_arrival_rate(rate_bits_per_s, cfg);
    let window = slot_s + delay_s;
    ArrivalSample {
        count: poisson(rng, effective_rate * window),
        effective_rate,
        window,
    }
}

/// Plain Poisson eMBB arrivals for one slot.
pub fn sample_embb_arrivals<R: Rng + ?Sized>(rng: &mut R, slot_s: f64, cfg: &QueueConfig) -> u64 {
    poisson(rng, cfg.embb_arrival_rate * slot_s)
}

fn poisson<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> u64 {
    if mean.is_nan() || mean <= 0.0 {
        return 0;
    }
    // finite: rates are validated and the delay window is capped
    Poisson::new(mean).expect("positive finite mean").sample(rng) as u64
}

/// URLLC service rate: `max(0, r - beta * di)`.
pub fn urllc_departure(rate_bits_per_s: f64, di: f64, cfg: &QueueConfig) -> ServiceSample {
    ServiceSample {
        rate: (rate_bits_per_s - cfg.serving_coefficient * di).max(0.0),
    }
}

/// Packets a bit rate can drain in one slot.
pub fn packets_per_slot(rate_bits_per_s: f64, slot_s: f64, packet_bytes: f64) -> f64 {
    rate_bits_per_s * slot_s / (8.0 * packet_bytes)
}

/// Advance every backlog by `[q + a - d]^+`. All quantities in packets.
pub fn step_queues(
    q: &SliceQueues,
    urllc_arrivals: &[f64],
    urllc_departures: &[f64],
    embb_arrivals: &[f64],
    embb_departures: &[f64],
) -> SliceQueues {
    assert_eq!(q.urllc.len(), urllc_arrivals.len());
    assert_eq!(q.urllc.len(), urllc_departures.len());
    assert_eq!(q.embb.len(), embb_arrivals.len());
    assert_eq!(q.embb.len(), embb_departures.len());
    let project = |b: &[f64], a: &[f64], d: &[f64]| -> Vec<f64> {
        b.iter()
            .zip(a)
            .zip(d)
            .map(|((&b, &a), &d)| (b + a - d).max(0.0))
            .collect()
    };
    SliceQueues {
        urllc: project(&q.urllc, urllc_arrivals, urllc_departures),
        embb: project(&q.embb, embb_arrivals, embb_departures),
        slot_index: q.slot_index + 1,
    }
}
