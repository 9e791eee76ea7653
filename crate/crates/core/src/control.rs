//! Delay-robust state feedback for the teleoperated plant
//! `x(k+1) = A x(k) + A_d x(k - T) + B u(k)`.
//!
//! A gain is certified with a Razumikhin-type argument. For a fixed gain `K`
//! and closed loop `A_c = A - B K`, pick a multiplier `q` and contraction
//! `a = 1 - alpha - q * gamma`, where `gamma = 1 + alpha * T_max`. `P` solves
//! `A_c' P A_c - a P = -I`, and the block matrix
//!
//! ```text
//!     [ -a P    0      A_c' P ]
//! N = [  0     -q P    A_d' P ]
//!     [ P A_c   P A_d   -P    ]
//! ```
//!
//! is negative definite exactly when `V(x+) < a V(x) + q V(x_d)` for all
//! states, with `V = x' P x`. Whenever the delayed value obeys
//! `V(x_d) <= gamma V(x)`, this gives `V(x+) < (1 - alpha) V(x)`. The margin
//! is `lambda_max(N) / lambda_max(P)`, minimized over a fixed grid of `q`.
//! A negative margin certifies the gain.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::config::ControlConfig;

const Q_GRID_LEN: usize = 120;
const Q_GRID_MIN: f64 = 1e-8;
const Q_GRID_MAX: f64 = 0.95;
const BISECTION_TOL: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("plant matrices are inconsistent: {0}")]
    Dimensions(String),
    #[error("Riccati iteration did not converge after {0} doublings")]
    RiccatiDiverged(usize),
    #[error("singular matrix in {0}")]
    Singular(&'static str),
    #[error(
        "no certified gain for T_max = {max_delay} after {attempts} candidates (best margin {best_margin:.3e})"
    )]
    SynthesisFailed {
        max_delay: usize,
        attempts: usize,
        best_margin: f64,
    },
    #[error("observed delay {observed} must exceed the certified delay {certified}")]
    NotAViolation { observed: usize, certified: usize },
    #[error("delay {delay} exceeds the history capacity {capacity}")]
    DelayBeyondHistory { delay: usize, capacity: usize },
}

fn ser_matrix<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
    let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
    rows.serialize(s)
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, m, |i, j| rows[i][j])
}

/// Discrete plant with one delayed-state coupling term.
#[derive(Debug, Clone, PartialEq)]
pub struct Plant {
    pub a: DMatrix<f64>,
    pub ad: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Indices of position states, which receive setpoints and tracking weight.
    pub tracked: Vec<usize>,
}

impl Plant {
    /// `axes` decoupled double integrators, states ordered `[p1, v1, p2, v2, ...]`.
    pub fn double_integrator(axes: usize, dt: f64, coupling: f64) -> Self {
        let n = 2 * axes;
        let mut a = DMatrix::identity(n, n);
        let mut b = DMatrix::zeros(n, axes);
        for ax in 0..axes {
            a[(2 * ax, 2 * ax + 1)] = dt;
            b[(2 * ax, ax)] = dt * dt / 2.0;
            b[(2 * ax + 1, ax)] = dt;
        }
        Self {
            a,
            ad: DMatrix::identity(n, n) * (coupling * dt),
            b,
            tracked: (0..axes).map(|ax| 2 * ax).collect(),
        }
    }

    pub fn from_config(cfg: &ControlConfig) -> Result<Self, ControlError> {
        let plant = match (&cfg.plant_a, &cfg.plant_ad, &cfg.plant_b) {
            (Some(a), Some(ad), Some(b)) => {
                let a = matrix_from_rows(a);
                let tracked = match &cfg.tracked_states {
                    Some(flags) => flags.iter().enumerate().filter(|(_, &t)| t).map(|(i, _)| i).collect(),
                    None => (0..a.nrows()).collect(),
                };
                Self {
                    a,
                    ad: matrix_from_rows(ad),
                    b: matrix_from_rows(b),
                    tracked,
                }
            }
            _ => Self::double_integrator(2, cfg.sampling_interval_s, cfg.delay_coupling),
        };
        plant.check()?;
        Ok(plant)
    }

    pub fn n_states(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.b.ncols()
    }

    fn check(&self) -> Result<(), ControlError> {
        let n = self.a.nrows();
        if self.a.ncols() != n || self.ad.shape() != (n, n) || self.b.nrows() != n {
            return Err(ControlError::Dimensions(format!(
                "A {:?}, A_d {:?}, B {:?}",
                self.a.shape(),
                self.ad.shape(),
                self.b.shape()
            )));
        }
        if self.tracked.is_empty() || self.tracked.iter().any(|&i| i >= n) {
            return Err(ControlError::Dimensions("tracked states out of range".into()));
        }
        Ok(())
    }

    /// Full state whose tracked entries equal `setpoint` and all others are zero.
    pub fn lift(&self, setpoint: &DVector<f64>) -> DVector<f64> {
        let mut x = DVector::zeros(self.n_states());
        for (v, &i) in setpoint.iter().zip(&self.tracked) {
            x[i] = *v;
        }
        x
    }

    pub fn closed_loop(&self, k: &DMatrix<f64>) -> DMatrix<f64> {
        &self.a - &self.b * k
    }

    /// State weight: `q` on tracked states, `r` elsewhere.
    pub fn state_weight(&self, q: f64, r: f64) -> DMatrix<f64> {
        let mut w = DMatrix::from_diagonal_element(self.n_states(), self.n_states(), r);
        for &i in &self.tracked {
            w[(i, i)] = q;
        }
        w
    }
}

/// Stabilizing solution of the discrete algebraic Riccati equation, by the
/// structured doubling algorithm.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>, ControlError> {
    let n = a.nrows();
    let r_inv = r.clone().try_inverse().ok_or(ControlError::Singular("R"))?;
    let mut ak = a.clone();
    let mut gk = b * r_inv * b.transpose();
    let mut hk = q.clone();
    let eye = DMatrix::<f64>::identity(n, n);
    for _ in 0..100 {
        let w = (&eye + &gk * &hk)
            .try_inverse()
            .ok_or(ControlError::Singular("doubling step"))?;
        let a_w = &ak * &w;
        let g_next = &gk + &a_w * &gk * ak.transpose();
        let h_next = &hk + ak.transpose() * &hk * &w * &ak;
        ak = &a_w * &ak;
        let change = (&h_next - &hk).norm();
        gk = (&g_next + g_next.transpose()) * 0.5;
        hk = (&h_next + h_next.transpose()) * 0.5;
        if change <= 1e-13 * hk.norm().max(1.0) {
            return Ok(hk);
        }
    }
    Err(ControlError::RiccatiDiverged(100))
}

/// Infinite-horizon LQR gain, `u = -K x`.
pub fn lqr_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>, ControlError> {
    let p = solve_dare(a, b, q, r)?;
    let bt_p = b.transpose() * &p;
    let lhs = r + &bt_p * b;
    let rhs = &bt_p * a;
    lhs.lu().solve(&rhs).ok_or(ControlError::Singular("LQR gain"))
}

/// Solve `A' P A - c P = -I` through its Kronecker form.
/// Returns `None` when `rho(A)^2 >= c`, where no positive solution exists.
pub fn solve_scaled_lyapunov(a: &DMatrix<f64>, c: f64) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let at = a.transpose();
    let mut m = at.kronecker(&at);
    for i in 0..n * n {
        m[(i, i)] -= c;
    }
    let rhs = -DVector::from_iterator(n * n, DMatrix::<f64>::identity(n, n).iter().copied());
    let x = m.lu().solve(&rhs)?;
    let p = DMatrix::from_column_slice(n, n, x.as_slice());
    let p = (&p + p.transpose()) * 0.5;
    (p.iter().all(|v| v.is_finite()) && min_eigenvalue(&p) > 0.0).then_some(p)
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn max_eigenvalue(sym: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(sym.clone()).eigenvalues.max()
}

fn min_eigenvalue(sym: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(sym.clone()).eigenvalues.min()
}

/// Multiplier grid shared by every margin evaluation, so margins at
/// different delays are directly comparable.
pub fn multiplier_grid() -> &'static [f64] {
    static GRID: OnceLock<Vec<f64>> = OnceLock::new();
    GRID.get_or_init(|| {
        let (lo, hi) = (Q_GRID_MIN.ln(), Q_GRID_MAX.ln());
        (0..Q_GRID_LEN)
            .map(|i| (lo + (hi - lo) * i as f64 / (Q_GRID_LEN - 1) as f64).exp())
            .collect()
    })
}

/// A verified stability certificate for one gain and delay bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainCertificate {
    #[serde(serialize_with = "ser_matrix")]
    pub gain: DMatrix<f64>,
    #[serde(serialize_with = "ser_matrix")]
    pub lyap_matrix: DMatrix<f64>,
    pub decay_rate: f64,
    pub gamma: f64,
    pub max_delay: usize,
    /// Largest eigenvalue of the block matrix at the best multiplier.
    pub max_block_eigenvalue: f64,
    /// `max_block_eigenvalue / lambda_max(P)`, scale-free.
    pub margin: f64,
    pub multiplier: f64,
    pub contraction: f64,
    /// Tracked-state LQR weight that produced the gain, when synthesized.
    pub lqr_q_weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Infeasible {
    /// Best margin found (`+inf` when no multiplier admits a Lyapunov matrix).
    pub margin: f64,
    pub reason: String,
}

/// Evaluate the certificate condition for `k` at delay bound `max_delay`.
pub fn razumikhin_feasible(
    plant: &Plant,
    k: &DMatrix<f64>,
    decay_rate: f64,
    max_delay: usize,
) -> Result<GainCertificate, Infeasible> {
    let gamma = 1.0 + decay_rate * max_delay as f64;
    let a_cl = plant.closed_loop(k);
    let rho = spectral_radius(&a_cl);
    let n = plant.n_states();
    let mut best: Option<(f64, f64, f64, f64, DMatrix<f64>)> = None;
    for &q in multiplier_grid() {
        let a = 1.0 - decay_rate - q * gamma;
        if a <= 0.0 || rho * rho >= a {
            continue;
        }
        let Some(p) = solve_scaled_lyapunov(&a_cl, a) else {
            continue;
        };
        let pa = &p * &a_cl;
        let pad = &p * &plant.ad;
        let mut blk = DMatrix::<f64>::zeros(3 * n, 3 * n);
        blk.view_mut((0, 0), (n, n)).copy_from(&(&p * -a));
        blk.view_mut((n, n), (n, n)).copy_from(&(&p * -q));
        blk.view_mut((2 * n, 2 * n), (n, n)).copy_from(&(-&p));
        blk.view_mut((2 * n, 0), (n, n)).copy_from(&pa);
        blk.view_mut((2 * n, n), (n, n)).copy_from(&pad);
        blk.view_mut((0, 2 * n), (n, n)).copy_from(&pa.transpose());
        blk.view_mut((n, 2 * n), (n, n)).copy_from(&pad.transpose());
        let blk = (&blk + blk.transpose()) * 0.5;
        let raw = max_eigenvalue(&blk);
        let margin = raw / max_eigenvalue(&p);
        if best.as_ref().is_none_or(|b| margin < b.0) {
            best = Some((margin, raw, q, a, p));
        }
    }
    match best {
        Some((margin, raw, q, a, p)) if margin < 0.0 => Ok(GainCertificate {
            gain: k.clone(),
            lyap_matrix: p,
            decay_rate,
            gamma,
            max_delay,
            max_block_eigenvalue: raw,
            margin,
            multiplier: q,
            contraction: a,
            lqr_q_weight: None,
        }),
        Some((margin, ..)) => Err(Infeasible {
            margin,
            reason: format!("block matrix not negative definite (margin {margin:.3e})"),
        }),
        None => Err(Infeasible {
            margin: f64::INFINITY,
            reason: format!("closed loop too slow for any multiplier (spectral radius {rho:.6})"),
        }),
    }
}

/// Search LQR gains of increasing tracked-state weight until one is certified
/// for `max_delay`.
pub fn synthesize_gain(
    plant: &Plant,
    cfg: &ControlConfig,
    max_delay: usize,
) -> Result<GainCertificate, ControlError> {
    let r = DMatrix::from_diagonal_element(plant.n_inputs(), plant.n_inputs(), cfg.lqr_r_weight);
    let mut best_margin = f64::INFINITY;
    let attempts = cfg.lqr_search_steps + 1;
    for i in 0..attempts {
        let qw = cfg.lqr_q_weight * cfg.lqr_search_factor.powi(i as i32);
        let q = plant.state_weight(qw, cfg.lqr_r_weight);
        let Ok(k) = lqr_gain(&plant.a, &plant.b, &q, &r) else {
            continue;
        };
        match razumikhin_feasible(plant, &k, cfg.decay_rate, max_delay) {
            Ok(mut cert) => {
                cert.lqr_q_weight = Some(qw);
                return Ok(cert);
            }
            Err(inf) => best_margin = best_margin.min(inf.margin),
        }
    }
    Err(ControlError::SynthesisFailed {
        max_delay,
        attempts,
        best_margin,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdjustedGain {
    #[serde(serialize_with = "ser_matrix")]
    pub nominal: DMatrix<f64>,
    #[serde(serialize_with = "ser_matrix")]
    pub adjusted: DMatrix<f64>,
    /// Squared Frobenius distance between the two gains.
    pub distance: f64,
    /// Position on the segment from the nominal to the safe gain.
    pub step: f64,
    pub observed_delay: usize,
    pub trigger_slot: Option<u64>,
    pub certificate: GainCertificate,
}

/// Move the nominal gain toward a gain certified for `observed_delay`, as
/// little as the certificate allows.
pub fn adjust_gain(
    plant: &Plant,
    nominal: &GainCertificate,
    observed_delay: usize,
    cfg: &ControlConfig,
    trigger_slot: Option<u64>,
) -> Result<AdjustedGain, ControlError> {
    let unchanged = |certificate: GainCertificate| AdjustedGain {
        nominal: nominal.gain.clone(),
        adjusted: nominal.gain.clone(),
        distance: 0.0,
        step: 0.0,
        observed_delay,
        trigger_slot,
        certificate,
    };
    if observed_delay < nominal.max_delay {
        return Err(ControlError::NotAViolation {
            observed: observed_delay,
            certified: nominal.max_delay,
        });
    }
    if observed_delay == nominal.max_delay {
        return Ok(unchanged(nominal.clone()));
    }
    if let Ok(cert) = razumikhin_feasible(plant, &nominal.gain, cfg.decay_rate, observed_delay) {
        return Ok(unchanged(cert));
    }
    let safe = synthesize_gain(plant, cfg, observed_delay)?;
    let blend = |s: f64| &nominal.gain * (1.0 - s) + &safe.gain * s;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut cert = safe.clone();
    while hi - lo > BISECTION_TOL {
        let mid = 0.5 * (lo + hi);
        match razumikhin_feasible(plant, &blend(mid), cfg.decay_rate, observed_delay) {
            Ok(c) => {
                hi = mid;
                cert = c;
            }
            Err(_) => lo = mid,
        }
    }
    let adjusted = blend(hi);
    if hi == 1.0 {
        cert = safe;
    }
    cert.lqr_q_weight = None;
    Ok(AdjustedGain {
        distance: (&adjusted - &nominal.gain).norm_squared(),
        nominal: nominal.gain.clone(),
        adjusted,
        step: hi,
        observed_delay,
        trigger_slot,
        certificate: cert,
    })
}

/// Nominal gain plus lazily computed adjustments for every delay the
/// history can represent. Adjustments depend only on the plant and config,
/// so one book can be shared by all robots and episodes of a run.
#[derive(Debug)]
pub struct GainBook {
    pub plant: Plant,
    pub nominal: GainCertificate,
    cfg: ControlConfig,
    adjusted: Vec<OnceLock<Result<DMatrix<f64>, String>>>,
}

impl GainBook {
    pub fn new(cfg: &ControlConfig) -> Result<Self, ControlError> {
        let plant = Plant::from_config(cfg)?;
        let nominal = synthesize_gain(&plant, cfg, cfg.max_delay_steps)?;
        Ok(Self {
            plant,
            nominal,
            cfg: cfg.clone(),
            adjusted: (0..=cfg.history_steps).map(|_| OnceLock::new()).collect(),
        })
    }

    /// Gain to apply while the observed delay is `delay` control steps.
    pub fn gain_for(&self, delay: usize) -> Result<&DMatrix<f64>, ControlError> {
        if delay <= self.nominal.max_delay {
            return Ok(&self.nominal.gain);
        }
        let slot = self.adjusted.get(delay).ok_or(ControlError::DelayBeyondHistory {
            delay,
            capacity: self.cfg.history_steps,
        })?;
        slot.get_or_init(|| {
            adjust_gain(&self.plant, &self.nominal, delay, &self.cfg, None)
                .map(|a| a.adjusted)
                .map_err(|e| e.to_string())
        })
        .as_ref()
        .map_err(|_| ControlError::SynthesisFailed {
            max_delay: delay,
            attempts: self.cfg.lqr_search_steps + 1,
            best_margin: f64::NAN,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_plant() -> Plant {
        Plant::from_config(&ControlConfig::default()).unwrap()
    }

    fn riccati_fixed_point(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
        let mut p = q.clone();
        for _ in 0..200_000 {
            let bt_p = b.transpose() * &p;
            let gain = (r + &bt_p * b).try_inverse().unwrap() * &bt_p * a;
            let next = a.transpose() * &p * a - a.transpose() * &p * b * gain + q;
            if (&next - &p).norm() < 1e-12 * next.norm() {
                return next;
            }
            p = next;
        }
        p
    }

    #[test]
    fn doubling_matches_fixed_point_iteration() {
        let plant = Plant::double_integrator(1, 0.1, 0.0);
        let q = plant.state_weight(10.0, 1.0);
        let r = DMatrix::from_element(1, 1, 1.0);
        let p = solve_dare(&plant.a, &plant.b, &q, &r).unwrap();
        let reference = riccati_fixed_point(&plant.a, &plant.b, &q, &r);
        assert!((&p - &reference).norm() < 1e-8 * reference.norm(), "{p} vs {reference}");
    }

    #[test]
    fn lyapunov_solution_satisfies_equation() {
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, -0.1, 0.3]);
        let p = solve_scaled_lyapunov(&a, 0.8).unwrap();
        let residual = a.transpose() * &p * &a - &p * 0.8 + DMatrix::identity(2, 2);
        assert!(residual.norm() < 1e-12);
        assert!(solve_scaled_lyapunov(&(a * 3.0), 0.8).is_none());
    }

    #[test]
    fn lqr_without_delay_coupling_is_certified() {
        let mut plant = default_plant();
        plant.ad.fill(0.0);
        let k = lqr_gain(&plant.a, &plant.b, &plant.state_weight(1e3, 1.0), &DMatrix::identity(2, 2)).unwrap();
        let cert = razumikhin_feasible(&plant, &k, 1e-3, 0).unwrap();
        assert!(cert.max_block_eigenvalue < 0.0);
    }

    #[test]
    fn zero_gain_on_double_integrator_is_infeasible() {
        let plant = default_plant();
        let err = razumikhin_feasible(&plant, &DMatrix::zeros(2, 4), 0.05, 3).unwrap_err();
        assert!(err.margin.is_infinite());
    }

    #[test]
    fn default_plant_synthesizes() {
        let cfg = ControlConfig::default();
        let cert = synthesize_gain(&default_plant(), &cfg, cfg.max_delay_steps).unwrap();
        assert!(cert.max_block_eigenvalue < 0.0 && cert.margin < 0.0);
        assert!((cert.gamma - 1.15).abs() < 1e-12);
        assert!(min_eigenvalue(&cert.lyap_matrix) > 0.0);
        let zero = synthesize_gain(&default_plant(), &cfg, 0).unwrap();
        assert!(zero.margin < 0.0);
    }

    #[test]
    fn strong_delayed_coupling_defeats_synthesis() {
        let plant = Plant {
            a: DMatrix::identity(2, 2) * 0.5,
            ad: DMatrix::identity(2, 2) * 1.2,
            b: DMatrix::from_row_slice(2, 1, &[1e-3, 0.0]),
            tracked: vec![0, 1],
        };
        let err = synthesize_gain(&plant, &ControlConfig::default(), 3).unwrap_err();
        assert!(matches!(err, ControlError::SynthesisFailed { .. }), "{err}");
    }

    #[test]
    fn adjustment_at_certified_delay_is_identity() {
        let cfg = ControlConfig::default();
        let plant = default_plant();
        let nominal = synthesize_gain(&plant, &cfg, cfg.max_delay_steps).unwrap();
        let adj = adjust_gain(&plant, &nominal, cfg.max_delay_steps, &cfg, Some(5)).unwrap();
        assert_eq!(adj.distance, 0.0);
        assert_eq!(adj.adjusted, nominal.gain);
        assert!(adj.step == 0.0);
    }

    #[test]
    fn adjustment_at_double_delay_moves_and_certifies() {
        let cfg = ControlConfig::default();
        let plant = default_plant();
        let nominal = synthesize_gain(&plant, &cfg, cfg.max_delay_steps).unwrap();
        let delay = 2 * cfg.max_delay_steps;
        assert!(razumikhin_feasible(&plant, &nominal.gain, cfg.decay_rate, delay).is_err());
        let adj = adjust_gain(&plant, &nominal, delay, &cfg, None).unwrap();
        assert!(adj.distance > 0.0);
        assert!(adj.step > 0.0 && adj.step <= 1.0);
        assert!(razumikhin_feasible(&plant, &adj.adjusted, cfg.decay_rate, delay).is_ok());
    }

    #[test]
    fn certificate_serializes_with_matrix_rows() {
        let cfg = ControlConfig::default();
        let cert = synthesize_gain(&default_plant(), &cfg, cfg.max_delay_steps).unwrap();
        let v: serde_json::Value = serde_json::to_value(&cert).unwrap();
        assert_eq!(v["gain"].as_array().unwrap().len(), 2);
        assert_eq!(v["gain"][0].as_array().unwrap().len(), 4);
        assert!(v["max_block_eigenvalue"].as_f64().unwrap() < 0.0);
    }
}
