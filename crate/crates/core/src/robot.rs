//! Delayed robot plant under state feedback, reference trajectories, and the
//! dexterity index.
//!
//! The controller acts on the current state but receives its setpoint over
//! the URLLC link, so the setpoint it tracks is `T` control steps old. The
//! plant additionally couples to its own state `T` steps back via `A_d`.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ControlConfig, ReferenceKind};
use crate::control::Plant;

/// Normalizers of the dexterity terms: position units, degrees, 1/length.
pub const TRACKING_SCALE: f64 = 10.0;
pub const ORIENTATION_SCALE_DEG: f64 = 180.0;
pub const CURVATURE_SCALE: f64 = 1.0;

const MOTION_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum RobotError {
    #[error("delay of {delay} steps exceeds history capacity {capacity}")]
    DelayBeyondHistory { delay: usize, capacity: usize },
    #[error("setpoint has {found} entries, plant tracks {expected}")]
    SetpointDimension { expected: usize, found: usize },
    #[error("custom reference needs waypoints with {0} coordinates")]
    BadWaypoints(usize),
}

/// Raw error signals of one control step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct DiComponents {
    pub tracking_error: f64,
    pub orientation_error_deg: f64,
    pub curvature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DexterityIndex {
    pub value: f64,
    pub components: DiComponents,
}

/// Dexterity of one component triple.
pub fn di_value(c: &DiComponents) -> f64 {
    0.4 * (1.0 - c.tracking_error / TRACKING_SCALE).max(0.0)
        + 0.3
            * ((1.0 - c.orientation_error_deg / ORIENTATION_SCALE_DEG).max(0.0)
                + (1.0 - c.curvature / CURVATURE_SCALE).max(0.0))
}

/// Dexterity of the window-averaged components. An empty window scores 1.
pub fn compute_di<'a, I>(window: I) -> DexterityIndex
where
    I: IntoIterator<Item = &'a DiComponents>,
{
    let mut sum = DiComponents::default();
    let mut n = 0usize;
    for c in window {
        sum.tracking_error += c.tracking_error;
        sum.orientation_error_deg += c.orientation_error_deg;
        sum.curvature += c.curvature;
        n += 1;
    }
    if n > 0 {
        let n = n as f64;
        sum.tracking_error /= n;
        sum.orientation_error_deg /= n;
        sum.curvature /= n;
    }
    DexterityIndex {
        value: di_value(&sum),
        components: sum,
    }
}

/// Sliding window of per-slot components.
#[derive(Debug, Clone)]
pub struct DiWindow {
    samples: VecDeque<DiComponents>,
    len: usize,
}

impl DiWindow {
    pub fn new(len: usize) -> Self {
        Self {
            samples: VecDeque::with_capacity(len),
            len,
        }
    }

    pub fn push(&mut self, c: DiComponents) {
        if self.samples.len() == self.len {
            self.samples.pop_front();
        }
        self.samples.push_back(c);
    }

    pub fn di(&self) -> DexterityIndex {
        compute_di(&self.samples)
    }
}

/// Setpoints for every control step of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub kind: ReferenceKind,
    points: Vec<DVector<f64>>,
}

impl ReferenceTrajectory {
    /// Setpoint at step `k`; holds the last point past the horizon.
    pub fn setpoint(&self, k: usize) -> &DVector<f64> {
        &self.points[k.min(self.points.len() - 1)]
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Ramp and hold-time parameters per reference family, in seconds and position units.
struct Shape {
    /// Duration of each segment, drawn uniformly from this range.
    segment_s: (f64, f64),
    amplitude: f64,
    /// Linear interpolation between knots, or a step at each knot.
    ramp: bool,
}

fn shape(kind: ReferenceKind) -> Shape {
    match kind {
        ReferenceKind::HighDi => Shape {
            segment_s: (2.0, 4.0),
            amplitude: 1.5,
            ramp: true,
        },
        ReferenceKind::ModerateDi => Shape {
            segment_s: (0.4, 0.8),
            amplitude: 4.0,
            ramp: true,
        },
        ReferenceKind::LowDi | ReferenceKind::Custom => Shape {
            segment_s: (0.03, 0.06),
            amplitude: 20.0,
            ramp: false,
        },
    }
}

/// Build a reference of `horizon` control steps for a plant tracking `dim` positions.
pub fn make_reference<R: Rng + ?Sized>(
    kind: ReferenceKind,
    horizon: usize,
    dim: usize,
    dt: f64,
    waypoints: Option<&[Vec<f64>]>,
    rng: &mut R,
) -> Result<ReferenceTrajectory, RobotError> {
    let horizon = horizon.max(1);
    if kind == ReferenceKind::Custom {
        let wps = waypoints.filter(|w| !w.is_empty() && w.iter().all(|p| p.len() == dim));
        let wps = wps.ok_or(RobotError::BadWaypoints(dim))?;
        let points = (0..horizon)
            .map(|k| {
                if wps.len() == 1 || horizon == 1 {
                    return DVector::from_column_slice(&wps[0]);
                }
                let x = k as f64 * (wps.len() - 1) as f64 / (horizon - 1) as f64;
                let i = (x.floor() as usize).min(wps.len() - 2);
                let f = x - i as f64;
                DVector::from_fn(dim, |d, _| wps[i][d] * (1.0 - f) + wps[i + 1][d] * f)
            })
            .collect();
        return Ok(ReferenceTrajectory { kind, points });
    }
    let s = shape(kind);
    // knots: (time in steps, position)
    let mut knots: Vec<(f64, DVector<f64>)> = vec![(0.0, DVector::zeros(dim))];
    let mut t = 0.0;
    while t < horizon as f64 {
        t += rng.random_range(s.segment_s.0..=s.segment_s.1) / dt;
        let p = DVector::from_fn(dim, |_, _| rng.random_range(-s.amplitude..=s.amplitude));
        knots.push((t, p));
    }
    let mut seg = 0;
    let points = (0..horizon)
        .map(|k| {
            let k = k as f64;
            while knots[seg + 1].0 <= k {
                seg += 1;
            }
            let (t0, p0) = &knots[seg];
            let (t1, p1) = &knots[seg + 1];
            if s.ramp {
                let f = (k - t0) / (t1 - t0);
                p0 * (1.0 - f) + p1 * f
            } else {
                p0.clone()
            }
        })
        .collect();
    Ok(ReferenceTrajectory { kind, points })
}

/// One robot: plant, state history, current gain and motion bookkeeping.
#[derive(Debug, Clone)]
pub struct RobotState {
    plant: Plant,
    /// Newest first; `history[d]` is `x(k - d)`.
    history: VecDeque<DVector<f64>>,
    /// Setpoints as issued, newest first.
    setpoints: VecDeque<DVector<f64>>,
    capacity: usize,
    pub current_gain: DMatrix<f64>,
    pub last_input: DVector<f64>,
    last_displacement: Option<DVector<f64>>,
    pub steps: u64,
}

impl RobotState {
    /// Start at `x0`, with a history able to hold delays up to `max_delay` steps.
    pub fn new(plant: Plant, gain: DMatrix<f64>, x0: DVector<f64>, max_delay: usize) -> Self {
        let capacity = max_delay + 1;
        let dim = plant.tracked.len();
        let pos0 = DVector::from_iterator(dim, plant.tracked.iter().map(|&i| x0[i]));
        Self {
            history: std::iter::repeat_n(x0, capacity).collect(),
            setpoints: std::iter::repeat_n(pos0, capacity).collect(),
            capacity,
            last_input: DVector::zeros(plant.n_inputs()),
            plant,
            current_gain: gain,
            last_displacement: None,
            steps: 0,
        }
    }

    pub fn from_config(plant: Plant, gain: DMatrix<f64>, cfg: &ControlConfig) -> Self {
        let x0 = DVector::zeros(plant.n_states());
        Self::new(plant, gain, x0, cfg.history_steps)
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.history[0]
    }

    pub fn position(&self) -> DVector<f64> {
        let x = self.state();
        DVector::from_iterator(self.plant.tracked.len(), self.plant.tracked.iter().map(|&i| x[i]))
    }

    pub fn plant(&self) -> &Plant {
        &self.plant
    }

    /// Largest delay, in steps, the history can serve.
    pub fn max_delay(&self) -> usize {
        self.capacity - 1
    }

    /// Advance one control step under a setpoint/state delay of `delay` steps.
    pub fn step(&mut self, setpoint: &DVector<f64>, delay: usize) -> Result<DiComponents, RobotError> {
        if delay >= self.capacity {
            return Err(RobotError::DelayBeyondHistory {
                delay,
                capacity: self.max_delay(),
            });
        }
        if setpoint.len() != self.plant.tracked.len() {
            return Err(RobotError::SetpointDimension {
                expected: self.plant.tracked.len(),
                found: setpoint.len(),
            });
        }
        self.setpoints.pop_back();
        self.setpoints.push_front(setpoint.clone());
        let before = self.position();
        let x = &self.history[0];
        let x_delayed = &self.history[delay];
        let target = self.plant.lift(&self.setpoints[delay]);
        let u = -(&self.current_gain * (x - target));
        let next = &self.plant.a * x + &self.plant.ad * x_delayed + &self.plant.b * &u;
        self.history.pop_back();
        self.history.push_front(next);
        self.last_input = u;
        self.steps += 1;

        let after = self.position();
        let displacement = &after - &before;
        let toward = setpoint - &before;
        let components = DiComponents {
            tracking_error: (&after - setpoint).norm(),
            orientation_error_deg: angle_between(&displacement, &toward).to_degrees(),
            curvature: match &self.last_displacement {
                Some(prev) if displacement.norm() > MOTION_EPS => {
                    (angle_between(prev, &displacement) / displacement.norm()).clamp(0.0, 1.0)
                }
                _ => 0.0,
            },
        };
        if displacement.norm() > MOTION_EPS {
            self.last_displacement = Some(displacement);
        }
        Ok(components)
    }
}

/// Unsigned angle in radians; zero if either vector is (near) zero.
fn angle_between(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na <= MOTION_EPS || nb <= MOTION_EPS {
        return 0.0;
    }
    (a.dot(b) / (na * nb)).clamp(-1.0, 1.0).acos()
}
