//! Deterministic packet-level simulation of AIMD flows sharing one
//! bottleneck link.
//!
//! [`Network`] is the event-driven dumbbell; [`run_scenario`] drives it for a
//! fixed duration and returns per-flow delivery traces; [`SimNet`] exposes it
//! as a [`crate::transport`] backend so striped transfers can run through the
//! bottleneck.

mod aimd;
mod network;
mod time;
mod transport;

use thiserror::Error;

use crate::metrics::{FlowTrace, Role};

pub use aimd::{aggregate_window_reduction, halve, steady_state_throughput, AimdFlowState, INITIAL_WINDOW};
pub use network::{EventKind, EventRecord, FlowStats, LinkStats, Network};
pub use time::{EventQueue, SimTime};
pub use transport::{SimConnector, SimListener, SimNet, SimStream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Bottleneck parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkConfig {
    /// Bits per second.
    pub capacity_bps: f64,
    /// Seconds, identical in both directions.
    pub one_way_delay: f64,
    /// Packets that may wait behind the one being serialized.
    pub queue_limit: usize,
    /// Forward-path Bernoulli drop probability per data packet.
    pub loss_probability: f64,
    /// Segment size in bytes.
    pub mss: u32,
    pub seed: u64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            capacity_bps: 10e6,
            one_way_delay: 0.05,
            queue_limit: 50,
            loss_probability: 0.0,
            mss: 1500,
            seed: 1,
        }
    }
}

impl LinkConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::InvalidArgument(msg));
        if !(self.capacity_bps > 0.0 && self.capacity_bps.is_finite()) {
            return bad(format!("capacity {} must be positive", self.capacity_bps));
        }
        if !(self.one_way_delay >= 0.0 && self.one_way_delay.is_finite()) {
            return bad(format!("one-way delay {} must be nonnegative", self.one_way_delay));
        }
        if self.queue_limit == 0 {
            return bad("queue limit must be at least 1 packet".into());
        }
        if !(0.0..=1.0).contains(&self.loss_probability) {
            return bad(format!("loss probability {} outside [0, 1]", self.loss_probability));
        }
        if self.mss == 0 {
            return bad("MSS must be at least 1 byte".into());
        }
        Ok(())
    }

    /// Capacity in bytes per second.
    pub fn capacity_bytes(&self) -> f64 {
        self.capacity_bps / 8.0
    }
}

/// One bulk flow in a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSpec {
    pub role: Role,
    /// Seconds after the start of the run.
    pub start: f64,
    /// Bytes to deliver; `None` is an unlimited greedy source.
    pub bytes: Option<u64>,
    /// Drop the next segment whenever cwnd reaches this many segments and
    /// signal the loss immediately.
    pub loss_at_window: Option<f64>,
    pub slow_start: bool,
}

impl Default for FlowSpec {
    fn default() -> Self {
        FlowSpec { role: Role::Targeted, start: 0.0, bytes: None, loss_at_window: None, slow_start: false }
    }
}

impl FlowSpec {
    pub fn greedy(role: Role, start: f64) -> Self {
        FlowSpec { role, start, ..FlowSpec::default() }
    }

    fn validate(&self) -> Result<(), SimError> {
        if !(self.start >= 0.0 && self.start.is_finite()) {
            return Err(SimError::InvalidArgument(format!("flow start {} must be nonnegative", self.start)));
        }
        if let Some(w) = self.loss_at_window {
            if w.is_nan() || w < 2.0 {
                return Err(SimError::InvalidArgument(format!("loss window {w} must be at least 2 segments")));
            }
        }
        Ok(())
    }
}

/// Default trace resolution in seconds.
pub const DEFAULT_BUCKET: f64 = 0.1;

/// Runs `flows` through one bottleneck for `duration` seconds.
pub fn run_scenario(config: &LinkConfig, flows: &[FlowSpec], duration: f64) -> Result<Vec<FlowTrace>, SimError> {
    run_scenario_with(config, flows, duration, DEFAULT_BUCKET)
}

pub fn run_scenario_with(
    config: &LinkConfig,
    flows: &[FlowSpec],
    duration: f64,
    bucket_width: f64,
) -> Result<Vec<FlowTrace>, SimError> {
    if flows.is_empty() {
        return Err(SimError::InvalidArgument("a scenario needs at least one flow".into()));
    }
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(SimError::InvalidArgument(format!("duration {duration} must be positive")));
    }
    let mut net = Network::new(config.clone(), bucket_width)?;
    for spec in flows {
        net.add_flow(spec.clone())?;
    }
    net.run_until(SimTime::from_secs_f64(duration));
    Ok(net.traces(duration))
}
