//! Parallel striped transfers over independent streams, a deterministic
//! dumbbell-bottleneck simulator with AIMD flows, and the throughput and
//! fairness metrics used to compare parallel against single-stream
//! transfers.

pub mod harness;
pub mod metrics;
pub mod simnet;
pub mod striping;
pub mod transport;
pub mod wire;
