//! Upper-level cost, Lyapunov drift-plus-penalty, the delay-tail slack and
//! the Lagrangian with its projected multiplier ascent.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{NetworkConfig, QueueConfig};

/// `sum_i 1 / (r_i^2 + eps)`, in whatever rate unit the caller uses.
/// The simulator passes Mbps.
pub fn cost_h(rates: &[f64], epsilon: f64) -> f64 {
    rates.iter().map(|r| 1.0 / (r * r + epsilon)).sum()
}

/// `L(F, G) = (F^2 + G^2) / 2` on slice-summed backlogs.
pub fn lyapunov(f: f64, g: f64) -> f64 {
    0.5 * (f * f + g * g)
}

/// `L(next) - L(prev) + v * h`.
pub fn drift_plus_penalty(prev: (f64, f64), next: (f64, f64), h: f64, v: f64) -> f64 {
    lyapunov(next.0, next.1) - lyapunov(prev.0, prev.1) + v * h
}

/// Probability that the delay at `rate` (bits/s) exceeds the deadline.
pub fn violation_probability(rate_bits_per_s: f64, queue: &QueueConfig, net: &NetworkConfig) -> f64 {
    (-queue.delay_rate_coeff * rate_bits_per_s * net.delay_deadline_s).exp()
}

/// Reliability slack `(1 - chi) - P(D > D_max)`; non-negative when the
/// reliability target is met.
pub fn delay_slack(rate_bits_per_s: f64, queue: &QueueConfig, net: &NetworkConfig) -> f64 {
    (1.0 - net.reliability_target) - violation_probability(rate_bits_per_s, queue, net)
}

/// The slack with the opposite sign convention, `P(D > D_max) - (1 - chi)`.
pub fn delay_slack_as_printed(rate_bits_per_s: f64, queue: &QueueConfig, net: &NetworkConfig) -> f64 {
    -delay_slack(rate_bits_per_s, queue, net)
}

/// Slack under the configured sign convention.
pub fn configured_slack(rate_bits_per_s: f64, queue: &QueueConfig, net: &NetworkConfig) -> f64 {
    if queue.eq12_as_printed {
        delay_slack_as_printed(rate_bits_per_s, queue, net)
    } else {
        delay_slack(rate_bits_per_s, queue, net)
    }
}

/// Rate at which the slack is exactly zero.
pub fn calibrated_root_rate(queue: &QueueConfig, net: &NetworkConfig) -> f64 {
    (1.0 / (1.0 - net.reliability_target)).ln() / (queue.delay_rate_coeff * net.delay_deadline_s)
}

/// End-to-end delay, exponential with tail `exp(-coeff * rate * d)`.
/// A zero rate never delivers and yields `+inf`.
pub fn sample_delay<R: Rng + ?Sized>(rng: &mut R, rate_bits_per_s: f64, queue: &QueueConfig) -> f64 {
    let u = 1.0 - rng.random::<f64>();
    let lambda = queue.delay_rate_coeff * rate_bits_per_s;
    if lambda > 0.0 {
        -u.ln() / lambda
    } else {
        f64::INFINITY
    }
}

/// Per-URLLC-user delays for one slot.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DelaySample {
    pub delays: Vec<f64>,
    pub violations: Vec<bool>,
}

pub fn sample_delays<R: Rng + ?Sized>(
    rng: &mut R,
    rates: &[f64],
    queue: &QueueConfig,
    net: &NetworkConfig,
) -> DelaySample {
    let delays: Vec<f64> = rates.iter().map(|&r| sample_delay(rng, r, queue)).collect();
    let violations = delays.iter().map(|&d| d > net.delay_deadline_s).collect();
    DelaySample { delays, violations }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LagrangianState {
    pub lambda_l: f64,
    pub last_drift: f64,
    pub last_penalty: f64,
    pub last_slack: f64,
    pub value: f64,
}

impl LagrangianState {
    /// Record one slot's terms and return `drift + penalty - lambda * slack`
    /// under the current multiplier.
    pub fn evaluate(&mut self, drift: f64, penalty: f64, slack: f64) -> f64 {
        self.last_drift = drift;
        self.last_penalty = penalty;
        self.last_slack = slack;
        self.value = drift + penalty - self.lambda_l * slack;
        self.value
    }

    /// Projected ascent on the dual: a negative slack (violation) raises the multiplier.
    pub fn ascend(&mut self, slack: f64, lr: f64) {
        self.lambda_l = (self.lambda_l - lr * slack).max(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn cost_anchors() {
        assert!((cost_h(&[0.0, 0.0], 1e-6) - 2e6).abs() < 1e-6);
        assert_eq!(cost_h(&[1.0], 0.0), 1.0);
        let base = [3.0, 5.0];
        let scaled = [6.0, 10.0];
        for (b, s) in base.iter().zip(&scaled) {
            assert!(cost_h(&[*s], 1e-6) < cost_h(&[*b], 1e-6));
        }
    }

    #[test]
    fn drift_anchors() {
        assert_eq!(drift_plus_penalty((3.0, 4.0), (3.0, 4.0), 0.25, 8.0), 2.0);
        assert_eq!(drift_plus_penalty((0.0, 0.0), (2.0, 0.0), 123.0, 0.0), 2.0);
        assert!(drift_plus_penalty((5.0, 5.0), (1.0, 2.0), 1.0, 1.0) < drift_plus_penalty((5.0, 5.0), (2.0, 2.0), 1.0, 1.0));
    }

    #[test]
    fn printed_slack_anchors() {
        let q = QueueConfig::default();
        let n = NetworkConfig::default();
        assert!((delay_slack_as_printed(0.0, &q, &n) - 0.95).abs() < 1e-15);
        assert!((delay_slack_as_printed(1e12, &q, &n) + 0.05).abs() < 1e-12);
        let root = calibrated_root_rate(&q, &n);
        assert!(delay_slack_as_printed(root, &q, &n).abs() < 1e-15);
        assert!(delay_slack(root, &q, &n).abs() < 1e-15);
        // the default calibration puts the root at 10 Mbps
        assert!((root - 10e6).abs() < 1e-3);
    }

    #[test]
    fn consistent_slack_rewards_higher_rates() {
        let q = QueueConfig::default();
        let n = NetworkConfig::default();
        assert!(delay_slack(5e6, &q, &n) < 0.0);
        assert!(delay_slack(20e6, &q, &n) > 0.0);
        let printed = QueueConfig {
            eq12_as_printed: true,
            ..q.clone()
        };
        assert_eq!(configured_slack(20e6, &printed, &n), -delay_slack(20e6, &q, &n));
    }

    #[test]
    fn delay_tail_matches_closed_form() {
        let q = QueueConfig::default();
        let n = NetworkConfig::default();
        let mut rng = stream(5, Stream::Delays);
        for rate in [5e6, 10e6, 17.3e6] {
            let draws = 1_000_000;
            let hits = (0..draws)
                .filter(|_| sample_delay(&mut rng, rate, &q) > n.delay_deadline_s)
                .count();
            let freq = hits as f64 / draws as f64;
            let p = violation_probability(rate, &q, &n);
            assert!((freq - p).abs() < 0.005, "rate {rate}: {freq} vs {p}");
        }
    }

    #[test]
    fn higher_rate_shortens_median_delay() {
        let q = QueueConfig::default();
        let median = |rate: f64| {
            let mut rng = stream(9, Stream::Delays);
            let mut v: Vec<f64> = (0..10_001).map(|_| sample_delay(&mut rng, rate, &q)).collect();
            v.sort_by(f64::total_cmp);
            v[5000]
        };
        assert!(median(20e6) < median(10e6));
    }

    #[test]
    fn zero_rate_is_a_violation() {
        let q = QueueConfig::default();
        let n = NetworkConfig::default();
        let s = sample_delays(&mut stream(1, Stream::Delays), &[0.0], &q, &n);
        assert!(s.delays[0].is_infinite());
        assert!(s.violations[0]);
    }

    #[test]
    fn inactive_multiplier_returns_drift_plus_penalty() {
        let mut l = LagrangianState::default();
        assert_eq!(l.evaluate(3.0, 4.0, -0.5), 7.0);
    }

    #[test]
    fn multiplier_rises_under_violation_and_floors_at_zero() {
        let mut l = LagrangianState::default();
        let mut prev = l.lambda_l;
        for _ in 0..100 {
            l.ascend(-0.2, 0.01);
            assert!(l.lambda_l > prev);
            prev = l.lambda_l;
        }
        for _ in 0..10_000 {
            l.ascend(0.05, 0.01);
        }
        assert_eq!(l.lambda_l, 0.0);
        l.ascend(0.05, 0.01);
        assert_eq!(l.lambda_l, 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn multiplier_stays_nonnegative(slacks in proptest::collection::vec(-1.0f64..1.0, 0..200), lr in 1e-4f64..1.0) {
                let mut l = LagrangianState::default();
                for s in slacks {
                    l.ascend(s, lr);
                    prop_assert!(l.lambda_l >= 0.0);
                }
            }

            #[test]
            fn value_recomputes_from_parts(lambda in 0.0f64..10.0, d in -1e3f64..1e3, p in 0.0f64..1e3, y in -1.0f64..1.0) {
                let mut l = LagrangianState { lambda_l: lambda, ..Default::default() };
                l.evaluate(d, p, y);
                let again = l.last_drift + l.last_penalty - l.lambda_l * l.last_slack;
                prop_assert!((l.value - again).abs() <= 1e-12);
            }
        }
    }
}
