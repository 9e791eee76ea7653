//! Network-slicing simulator for teleoperation: Rayleigh PRB channel,
//! URLLC/eMBB queues, delay-robust robot control, a dual-agent actor-critic
//! slice allocator and a proportional-fair baseline.

pub mod baseline;
pub mod channel;
pub mod config;
pub mod control;
pub mod drl;
pub mod objective;
pub mod queues;
pub mod rng;
pub mod robot;
pub mod sim;

pub use channel::{ChannelState, LinkBudget, PrbAllocation, RateVector, Slice};
pub use config::{Config, ConfigError, ReferenceKind};
pub use control::{GainBook, GainCertificate};
pub use drl::{Checkpoint, TrainedAgents};
pub use sim::experiments::{ExperimentResult, SweepKind};
pub use sim::{EpisodeTrace, PolicyKind, SimError, SlotRecord};
