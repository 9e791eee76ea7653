//! Typed run configuration.
//!
//! Every scalar used by the simulator lives here. The on-disk format is a flat
//! TOML table: all keys sit at the top level, regardless of which section
//! struct owns them. Overrides (`key=value`) and environment variables are
//! applied on top of the file, then the whole config is validated.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Prefix for environment-variable overrides, e.g. `TELESLICE_NUM_PRBS=30`.
pub const ENV_PREFIX: &str = "TELESLICE_";

/// Keys whose default is "unset" and therefore absent from a serialized default config.
const OPTIONAL_KEYS: &[&str] = &[
    "plant_a",
    "plant_ad",
    "plant_b",
    "tracked_states",
    "reference_waypoints",
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse config: {0}")]
    Parse(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("malformed override `{0}` (expected key=value)")]
    MalformedOverride(String),
    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        reason: reason.into(),
    }
}

/// Radio parameters. Powers are kept in dBm here and converted to watts
/// once, when a [`crate::channel::LinkBudget`] is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// Total carrier bandwidth in Hz, shared evenly by all PRBs.
    pub bandwidth_hz: f64,
    pub noise_variance_dbm: f64,
    pub transmit_power_dbm: f64,
    pub num_prbs: usize,
    /// Fraction of slots in which a URLLC delay must stay under the deadline.
    pub reliability_target: f64,
    pub delay_deadline_s: f64,
    pub n_embb: usize,
    pub n_urllc: usize,
    /// Scale parameter of the Rayleigh amplitude distribution.
    pub rayleigh_scale: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            bandwidth_hz: 10e6,
            noise_variance_dbm: -110.0,
            transmit_power_dbm: 20.0,
            num_prbs: 25,
            reliability_target: 0.95,
            delay_deadline_s: 0.020,
            n_embb: 3,
            n_urllc: 3,
            rayleigh_scale: 1.0,
        }
    }
}

impl NetworkConfig {
    pub fn n_users(&self) -> usize {
        self.n_embb + self.n_urllc
    }

    pub fn bandwidth_per_prb(&self) -> f64 {
        self.bandwidth_hz / self.num_prbs as f64
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.num_prbs < self.n_users() {
            return Err(invalid(
                "num_prbs",
                format!(
                    "num_prbs >= n_embb + n_urllc violated ({} < {} + {})",
                    self.num_prbs, self.n_embb, self.n_urllc
                ),
            ));
        }
        if self.n_embb == 0 || self.n_urllc == 0 {
            return Err(invalid(
                "n_embb",
                "each slice needs at least one user (n_embb >= 1, n_urllc >= 1)",
            ));
        }
        if !(self.reliability_target > 0.0 && self.reliability_target <= 1.0) {
            return Err(invalid(
                "reliability_target",
                format!(
                    "reliability target must lie in (0, 1], got {}",
                    self.reliability_target
                ),
            ));
        }
        positive("bandwidth_hz", self.bandwidth_hz)?;
        positive("delay_deadline_s", self.delay_deadline_s)?;
        positive("rayleigh_scale", self.rayleigh_scale)?;
        finite("noise_variance_dbm", self.noise_variance_dbm)?;
        finite("transmit_power_dbm", self.transmit_power_dbm)?;
        Ok(())
    }
}

/// Arrival, service and objective weights for the two slice queues.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueueConfig {
    /// Base URLLC command rate per user, packets/s.
    pub base_arrival_rate: f64,
    /// Rate sensitivity, packets/s per Mbps of URLLC throughput.
    pub arrival_sensitivity: f64,
    /// Service reduction per unit of dexterity index, bits/s.
    pub serving_coefficient: f64,
    /// Mean eMBB packet rate per user, packets/s.
    pub embb_arrival_rate: f64,
    /// Delay-tail coefficient: P(D > d) = exp(-coeff * rate_bps * d).
    pub delay_rate_coeff: f64,
    /// Floor added to squared rates (Mbps^2) in the per-slot cost.
    pub epsilon: f64,
    /// Weight of the rate cost against queue drift.
    pub penalty_weight: f64,
    pub urllc_packet_bytes: f64,
    pub embb_packet_bytes: f64,
    /// Use the delay slack with the sign exactly as originally printed
    /// (`exp(..) - (1 - reliability)`) instead of the reliability-consistent one.
    pub eq12_as_printed: bool,
}

impl Default for QueueConfig {
    fn default() -> Self {
        Self {
            base_arrival_rate: 50.0,
            arrival_sensitivity: 0.1,
            serving_coefficient: 1e5,
            embb_arrival_rate: 4000.0,
            // exp(-coeff * 10 Mbps * 20 ms) = 0.05
            delay_rate_coeff: 20f64.ln() / (10e6 * 0.020),
            epsilon: 1e-6,
            penalty_weight: 1000.0,
            urllc_packet_bytes: 256.0,
            embb_packet_bytes: 1500.0,
            eq12_as_printed: false,
        }
    }
}

impl QueueConfig {
    fn validate(&self) -> Result<(), ConfigError> {
        if !(self.arrival_sensitivity > 0.0 && self.arrival_sensitivity < 1.0) {
            return Err(invalid(
                "arrival_sensitivity",
                format!(
                    "must satisfy 0 < arrival_sensitivity < 1, got {}",
                    self.arrival_sensitivity
                ),
            ));
        }
        nonneg("base_arrival_rate", self.base_arrival_rate)?;
        positive("serving_coefficient", self.serving_coefficient)?;
        nonneg("embb_arrival_rate", self.embb_arrival_rate)?;
        positive("delay_rate_coeff", self.delay_rate_coeff)?;
        positive("epsilon", self.epsilon)?;
        positive("penalty_weight", self.penalty_weight)?;
        positive("urllc_packet_bytes", self.urllc_packet_bytes)?;
        positive("embb_packet_bytes", self.embb_packet_bytes)?;
        Ok(())
    }
}

/// Reference trajectory family handed to every URLLC robot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceKind {
    LowDi,
    ModerateDi,
    HighDi,
    Custom,
}

impl std::str::FromStr for ReferenceKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "low-di" | "low" => Ok(Self::LowDi),
            "moderate-di" | "moderate" => Ok(Self::ModerateDi),
            "high-di" | "high" => Ok(Self::HighDi),
            "custom" => Ok(Self::Custom),
            other => Err(format!("unknown reference kind `{other}`")),
        }
    }
}

impl std::fmt::Display for ReferenceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::LowDi => "low-di",
            Self::ModerateDi => "moderate-di",
            Self::HighDi => "high-di",
            Self::Custom => "custom",
        })
    }
}

/// Robot plant and controller synthesis parameters.
///
/// When `plant_a`/`plant_ad`/`plant_b` are unset the plant is a two-axis
/// double integrator discretized at `sampling_interval_s`, with the delayed
/// coupling `A_d = delay_coupling * dt * I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlConfig {
    pub sampling_interval_s: f64,
    /// Largest delay (in control steps) the nominal gain is certified for.
    pub max_delay_steps: usize,
    /// Depth of the state history; delays beyond it are clamped.
    pub history_steps: usize,
    /// Per-step Lyapunov decay rate required by the certificate.
    pub decay_rate: f64,
    /// Initial LQR weight on tracked (position) states.
    pub lqr_q_weight: f64,
    pub lqr_r_weight: f64,
    /// Geometric growth of the tracked-state weight between synthesis attempts.
    pub lqr_search_factor: f64,
    pub lqr_search_steps: usize,
    /// Continuous-time delayed-state coupling rate (1/s) of the default plant.
    pub delay_coupling: f64,
    pub plant_a: Option<Vec<Vec<f64>>>,
    pub plant_ad: Option<Vec<Vec<f64>>>,
    pub plant_b: Option<Vec<Vec<f64>>>,
    /// Which states are positions (weighted by `lqr_q_weight` and tracked).
    pub tracked_states: Option<Vec<bool>>,
    pub reference: ReferenceKind,
    pub reference_waypoints: Option<Vec<Vec<f64>>>,
    /// Sliding window, in slots, over which the dexterity index is averaged.
    pub di_window: usize,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            sampling_interval_s: 0.01,
            max_delay_steps: 3,
            history_steps: 12,
            decay_rate: 0.05,
            lqr_q_weight: 100.0,
            lqr_r_weight: 1.0,
            lqr_search_factor: 10f64.powf(0.1),
            lqr_search_steps: 30,
            delay_coupling: 0.2,
            plant_a: None,
            plant_ad: None,
            plant_b: None,
            tracked_states: None,
            reference: ReferenceKind::ModerateDi,
            reference_waypoints: None,
            di_window: 20,
        }
    }
}

impl ControlConfig {
    /// `1 + decay_rate * max_delay_steps`.
    pub fn gamma(&self) -> f64 {
        1.0 + self.decay_rate * self.max_delay_steps as f64
    }

    fn validate(&self) -> Result<(), ConfigError> {
        positive("sampling_interval_s", self.sampling_interval_s)?;
        positive("decay_rate", self.decay_rate)?;
        if self.decay_rate >= 1.0 {
            return Err(invalid("decay_rate", "must be < 1"));
        }
        if self.gamma() < 1.0 {
            return Err(invalid("decay_rate", "gamma = 1 + decay_rate * max_delay_steps must be >= 1"));
        }
        if self.history_steps < self.max_delay_steps {
            return Err(invalid(
                "history_steps",
                "history_steps must be >= max_delay_steps",
            ));
        }
        positive("lqr_q_weight", self.lqr_q_weight)?;
        positive("lqr_r_weight", self.lqr_r_weight)?;
        if self.lqr_search_factor <= 1.0 {
            return Err(invalid("lqr_search_factor", "must be > 1"));
        }
        nonneg("delay_coupling", self.delay_coupling)?;
        if self.di_window == 0 {
            return Err(invalid("di_window", "must be >= 1"));
        }
        let explicit = [&self.plant_a, &self.plant_ad, &self.plant_b]
            .iter()
            .filter(|m| m.is_some())
            .count();
        if explicit != 0 && explicit != 3 {
            return Err(invalid(
                "plant_a",
                "plant_a, plant_ad and plant_b must be given together",
            ));
        }
        if let (Some(a), Some(ad), Some(b)) = (&self.plant_a, &self.plant_ad, &self.plant_b) {
            let n = a.len();
            let square = |m: &Vec<Vec<f64>>| m.len() == n && m.iter().all(|r| r.len() == n);
            if n == 0 || !square(a) || !square(ad) {
                return Err(invalid("plant_a", "plant_a and plant_ad must be square and of equal size"));
            }
            if b.len() != n || b.is_empty() || b[0].is_empty() || b.iter().any(|r| r.len() != b[0].len()) {
                return Err(invalid("plant_b", "plant_b must have one row per state"));
            }
            if let Some(t) = &self.tracked_states {
                if t.len() != n {
                    return Err(invalid("tracked_states", "one flag per state required"));
                }
            }
        }
        if self.reference == ReferenceKind::Custom
            && self.reference_waypoints.as_ref().is_none_or(|w| w.is_empty())
        {
            return Err(invalid(
                "reference_waypoints",
                "custom reference requires at least one waypoint",
            ));
        }
        Ok(())
    }
}

/// Hyperparameters of the dual-agent actor-critic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DrlConfig {
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub discount: f64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub lagrange_lr: f64,
    pub hidden_sizes: Vec<usize>,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of training over which exploration decays linearly.
    pub epsilon_decay_fraction: f64,
    pub entropy_coef: f64,
    pub reward_clip: f64,
    /// Multiplier applied to the drift-plus-penalty before clipping.
    pub reward_scale: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for DrlConfig {
    fn default() -> Self {
        Self {
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            discount: 0.95,
            replay_capacity: 10_000,
            batch_size: 64,
            episodes: 300,
            steps_per_episode: 100,
            lagrange_lr: 0.01,
            hidden_sizes: vec![64, 64],
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.5,
            entropy_coef: 1e-3,
            reward_clip: 100.0,
            reward_scale: 1e-3,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl DrlConfig {
    fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..1.0).contains(&self.discount) {
            return Err(invalid("discount", "must satisfy 0 <= discount < 1"));
        }
        if self.batch_size == 0 || self.replay_capacity < self.batch_size {
            return Err(invalid(
                "replay_capacity",
                "replay_capacity must be >= batch_size >= 1",
            ));
        }
        positive("actor_lr", self.actor_lr)?;
        positive("critic_lr", self.critic_lr)?;
        positive("lagrange_lr", self.lagrange_lr)?;
        positive("reward_clip", self.reward_clip)?;
        positive("reward_scale", self.reward_scale)?;
        positive("grad_clip", self.grad_clip)?;
        nonneg("entropy_coef", self.entropy_coef)?;
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return Err(invalid("hidden_sizes", "need at least one non-empty hidden layer"));
        }
        for (name, v) in [
            ("epsilon_start", self.epsilon_start),
            ("epsilon_end", self.epsilon_end),
            ("epsilon_decay_fraction", self.epsilon_decay_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(
                    match name {
                        "epsilon_start" => "epsilon_start",
                        "epsilon_end" => "epsilon_end",
                        _ => "epsilon_decay_fraction",
                    },
                    "must lie in [0, 1]",
                ));
            }
        }
        if self.seed > i64::MAX as u64 {
            return Err(invalid("seed", "must fit in a signed 64-bit TOML integer"));
        }
        if self.steps_per_episode == 0 {
            return Err(invalid("steps_per_episode", "must be >= 1"));
        }
        Ok(())
    }
}

/// Closed-loop simulation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Length of one decision slot.
    pub slot_duration_s: f64,
    /// Averaging window (slots) of the proportional-fair throughput tracker.
    pub pf_time_constant: f64,
    /// Episode length used by `evaluate`, `compare` and sweeps.
    pub eval_steps: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            slot_duration_s: 0.01,
            pf_time_constant: 100.0,
            eval_steps: 200,
        }
    }
}

impl SimConfig {
    fn validate(&self) -> Result<(), ConfigError> {
        positive("slot_duration_s", self.slot_duration_s)?;
        if self.pf_time_constant < 1.0 {
            return Err(invalid("pf_time_constant", "must be >= 1 slot"));
        }
        if self.eval_steps == 0 {
            return Err(invalid("eval_steps", "must be >= 1"));
        }
        Ok(())
    }
}

/// The full configuration. Serialized as one flat table.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Config {
    #[serde(flatten)]
    pub network: NetworkConfig,
    #[serde(flatten)]
    pub queue: QueueConfig,
    #[serde(flatten)]
    pub control: ControlConfig,
    #[serde(flatten)]
    pub drl: DrlConfig,
    #[serde(flatten)]
    pub sim: SimConfig,
}

impl Config {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.network.validate()?;
        self.queue.validate()?;
        self.control.validate()?;
        self.drl.validate()?;
        self.sim.validate()
    }

    /// Parse a flat TOML document. Missing keys take their defaults; unknown keys are rejected.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let known = known_keys();
        if let Some(k) = table.keys().find(|k| !known.contains(k.as_str())) {
            return Err(ConfigError::UnknownKey(k.clone()));
        }
        let cfg: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Apply `key=value` overrides. Values are parsed as TOML literals, falling
    /// back to a bare string (so `reference=high-di` works unquoted).
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, ConfigError> {
        let mut table = match toml::Value::try_from(self) {
            Ok(toml::Value::Table(t)) => t,
            _ => unreachable!("config serializes to a table"),
        };
        let known = known_keys();
        for raw in overrides {
            let raw = raw.as_ref();
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| ConfigError::MalformedOverride(raw.to_string()))?;
            let key = key.trim();
            if !known.contains(key) {
                return Err(ConfigError::UnknownKey(key.to_string()));
            }
            table.insert(key.to_string(), parse_literal(value.trim()));
        }
        let cfg: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Collect overrides from `TELESLICE_<KEY>` environment variables.
    pub fn env_overrides() -> Vec<String> {
        let known = known_keys();
        let mut out: Vec<String> = std::env::vars()
            .filter_map(|(k, v)| {
                let key = k.strip_prefix(ENV_PREFIX)?.to_ascii_lowercase();
                known.contains(key.as_str()).then(|| format!("{key}={v}"))
            })
            .collect();
        out.sort();
        out
    }

    /// Stable SHA-256 over the canonical (key-sorted) JSON form.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("json value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// Load a config file (or defaults when `path` is `None`) and apply overrides.
pub fn load_config<S: AsRef<str>>(path: Option<&Path>, overrides: &[S]) -> Result<Config, ConfigError> {
    let base = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                path: p.display().to_string(),
                source,
            })?;
            Config::from_toml_str(&text)?
        }
        None => Config::default(),
    };
    base.with_overrides(overrides)
}

fn known_keys() -> BTreeSet<String> {
    let mut keys: BTreeSet<String> = match toml::Value::try_from(Config::default()) {
        Ok(toml::Value::Table(t)) => t.keys().cloned().collect(),
        _ => BTreeSet::new(),
    };
    keys.extend(OPTIONAL_KEYS.iter().map(|s| s.to_string()));
    keys
}

fn parse_literal(value: &str) -> toml::Value {
    format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

fn positive(field: &'static str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(field, format!("must be finite and > 0, got {v}")))
    }
}

fn nonneg(field: &'static str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(invalid(field, format!("must be finite and >= 0, got {v}")))
    }
}

fn finite(field: &'static str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, format!("must be finite, got {v}")))
    }
}
