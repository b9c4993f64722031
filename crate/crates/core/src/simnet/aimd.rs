//! Additive-increase / multiplicative-decrease window control.
//!
//! The window grows by `1/cwnd` segments per acknowledged segment, which is
//! one segment per round trip, and halves when a loss is detected. At most
//! one halving happens per window of data: a loss only reduces the window if
//! the lost segment was sent after the previous reduction.

use super::{SimError, SimTime};

/// Window every flow starts with.
pub const INITIAL_WINDOW: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AimdFlowState {
    pub flow_id: usize,
    /// Congestion window in segments, never below 1.
    pub cwnd: f64,
    /// Slow-start threshold; only consulted when slow start is enabled.
    pub ssthresh: f64,
    pub slow_start: bool,
    /// Propagation plus serialization round trip, seconds.
    pub rtt_base: f64,
    pub in_flight: u32,
    /// Bytes delivered in order to the receiving application.
    pub delivered: u64,
    pub next_seq: u64,
    pub highest_acked: Option<u64>,
    last_reduction: Option<SimTime>,
}

impl AimdFlowState {
    pub fn new(flow_id: usize, rtt_base: f64) -> Self {
        AimdFlowState {
            flow_id,
            cwnd: INITIAL_WINDOW,
            ssthresh: f64::INFINITY,
            slow_start: false,
            rtt_base,
            in_flight: 0,
            delivered: 0,
            next_seq: 0,
            highest_acked: None,
            last_reduction: None,
        }
    }

    pub fn with_cwnd(mut self, cwnd: f64) -> Self {
        self.cwnd = cwnd.max(1.0);
        self
    }

    /// Segments the window currently admits in flight.
    pub fn window(&self) -> u32 {
        self.cwnd.floor().max(1.0) as u32
    }

    pub fn can_send(&self) -> bool {
        self.in_flight < self.window()
    }

    /// A segment carrying new data was acknowledged.
    pub fn on_ack(&mut self, seq: u64) {
        self.in_flight = self.in_flight.saturating_sub(1);
        self.highest_acked = Some(self.highest_acked.map_or(seq, |h| h.max(seq)));
        if self.slow_start && self.cwnd < self.ssthresh {
            self.cwnd += 1.0;
        } else {
            self.cwnd += 1.0 / self.cwnd;
        }
    }

    /// Congestion signal for a segment sent at `sent_at`, detected at `now`.
    /// Returns whether the window was halved.
    pub fn on_loss(&mut self, now: SimTime, sent_at: SimTime) -> bool {
        if self.last_reduction.is_some_and(|t| sent_at <= t) {
            return false;
        }
        self.cwnd = halve(self.cwnd);
        self.ssthresh = self.cwnd;
        self.last_reduction = Some(now);
        true
    }

    pub fn last_reduction(&self) -> Option<SimTime> {
        self.last_reduction
    }
}

pub fn halve(cwnd: f64) -> f64 {
    (cwnd / 2.0).max(1.0)
}

/// Fraction of the aggregate window lost when `hit` out of `flows` equal-window
/// flows halve at the same instant.
pub fn aggregate_window_reduction(flows: u32, hit: u32) -> Result<f64, SimError> {
    if flows == 0 {
        return Err(SimError::InvalidArgument("flow count must be at least 1".into()));
    }
    if hit > flows {
        return Err(SimError::InvalidArgument(format!("{hit} flows hit out of {flows}")));
    }
    Ok(hit as f64 / (2.0 * flows as f64))
}

/// Mean rate of a loss-free sawtooth oscillating between `w_max/2` and
/// `w_max` segments per round trip, in bytes per second.
pub fn steady_state_throughput(w_max: f64, mss: u32, rtt: f64) -> f64 {
    0.75 * w_max * mss as f64 / rtt
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_ack_at_cwnd_one_doubles() {
        let mut s = AimdFlowState::new(0, 0.1).with_cwnd(1.0);
        s.in_flight = 1;
        s.on_ack(0);
        assert_eq!(s.cwnd, 2.0);
        assert_eq!(s.in_flight, 0);
    }

    #[test]
    fn a_full_window_of_acks_adds_about_one_segment() {
        let mut s = AimdFlowState::new(0, 0.1).with_cwnd(10.0);
        s.in_flight = 10;
        for seq in 0..10 {
            s.on_ack(seq);
        }
        assert!((s.cwnd - 11.0).abs() < 0.1, "cwnd {}", s.cwnd);
        assert_eq!(s.highest_acked, Some(9));
    }

    #[test]
    fn loss_halves_with_floor() {
        let mut s = AimdFlowState::new(0, 0.1).with_cwnd(20.0);
        assert!(s.on_loss(SimTime(10), SimTime(5)));
        assert_eq!(s.cwnd, 10.0);
        let mut tiny = AimdFlowState::new(0, 0.1).with_cwnd(1.0);
        tiny.on_loss(SimTime(10), SimTime(5));
        assert_eq!(tiny.cwnd, 1.0);
    }

    #[test]
    fn losses_from_the_same_window_halve_once() {
        let mut s = AimdFlowState::new(0, 0.1).with_cwnd(32.0);
        assert!(s.on_loss(SimTime(100), SimTime(10)));
        // Sent before the reduction: same window, ignored.
        assert!(!s.on_loss(SimTime(120), SimTime(20)));
        assert_eq!(s.cwnd, 16.0);
        // Sent after the reduction: a new window.
        assert!(s.on_loss(SimTime(300), SimTime(150)));
        assert_eq!(s.cwnd, 8.0);
    }

    #[test]
    fn slow_start_grows_per_ack_until_threshold() {
        let mut s = AimdFlowState::new(0, 0.1);
        s.slow_start = true;
        s.ssthresh = 4.0;
        s.on_ack(0);
        s.on_ack(1);
        assert_eq!(s.cwnd, 4.0);
        s.on_ack(2);
        assert_eq!(s.cwnd, 4.25);
    }

    #[test]
    fn reduction_fractions() {
        assert_eq!(aggregate_window_reduction(5, 2).unwrap(), 0.2);
        assert_eq!(aggregate_window_reduction(1, 1).unwrap(), 0.5);
        assert_eq!(aggregate_window_reduction(7, 0).unwrap(), 0.0);
        assert!(aggregate_window_reduction(0, 0).is_err());
        assert!(aggregate_window_reduction(2, 3).is_err());
    }

    #[test]
    fn sawtooth_closed_form() {
        assert_eq!(steady_state_throughput(20.0, 1500, 0.1), 225_000.0);
        let mss = 1460;
        let rtt = 0.07;
        assert!((steady_state_throughput(2.0, mss, rtt) - 1.5 * mss as f64 / rtt).abs() < 1e-9);
    }
}
