//! Experiment orchestration: parallelism sweeps with competing background
//! traffic, run either through the simulator or over loopback sockets, and
//! written out as CSV.

mod config;
mod output;
mod sockets;

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::metrics::{jain_fairness, throughput, FlowTrace, MetricsError, Role, TimeWindow};
use crate::simnet::{run_scenario, FlowSpec, SimError};
use crate::wire::partition;

pub use config::{ConfigError, ExperimentConfig, Mode, DEFAULT_LEVELS};
pub use output::{
    read_fairness, read_throughput, summarize, summarize_dir, write_fairness, write_throughput, FairnessRow, Summary,
    SummaryRow, ThroughputRow, FAIRNESS_FILE, FAIRNESS_HEADER, METADATA_FILE, THROUGHPUT_FILE, THROUGHPUT_HEADER,
};
pub use sockets::socket_point;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("simulation: {0}")]
    Sim(#[from] SimError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("network: {0}")]
    Network(io::Error),
    #[error("transfer failed: {0}")]
    TransferFailed(String),
    #[error("output: {0}")]
    Output(#[from] csv::Error),
    #[error("output: {0}")]
    Io(#[from] io::Error),
}

/// How sweep points are scheduled. Points are independent, so the parallel
/// schedule produces the same rows as the sequential one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        return Execution::Parallel;
        #[cfg(not(feature = "parallel"))]
        return Execution::Sequential;
    }
}

/// Rows for one (parallelism level, repetition) point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointResult {
    pub throughput: ThroughputRow,
    pub fairness: FairnessRow,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentResult {
    pub throughput: Vec<ThroughputRow>,
    pub fairness: Vec<FairnessRow>,
}

impl ExperimentResult {
    fn from_points(points: Vec<PointResult>) -> Self {
        let (throughput, fairness) = points.into_iter().map(|p| (p.throughput, p.fairness)).unzip();
        ExperimentResult { throughput, fairness }
    }

    /// Writes both CSVs and the configuration they came from into `dir`.
    pub fn write(&self, dir: &Path, config: &ExperimentConfig) -> Result<(), HarnessError> {
        fs::create_dir_all(dir)?;
        write_throughput(&dir.join(THROUGHPUT_FILE), &self.throughput)?;
        write_fairness(&dir.join(FAIRNESS_FILE), &self.fairness)?;
        fs::write(dir.join(METADATA_FILE), config.to_text())?;
        Ok(())
    }
}

/// Seed for repetition `rep`; every parallelism level in a repetition shares it.
pub fn rep_seed(base: u64, rep: u32) -> u64 {
    base.wrapping_add(rep as u64)
}

/// Background greedy flows from time zero, then `n` targeted flows carrying
/// the payload's stripes once the lead has passed.
pub fn sim_flows(config: &ExperimentConfig, n: usize) -> Result<Vec<FlowSpec>, HarnessError> {
    let n = u32::try_from(n).map_err(|_| SimError::InvalidArgument(format!("{n} flows is too many")))?;
    let chunks = partition(config.payload_size, n).map_err(|e| SimError::InvalidArgument(e.to_string()))?;
    let background = (0..config.background_flows).map(|_| FlowSpec::greedy(Role::Background, 0.0));
    let targeted = chunks.iter().map(|c| FlowSpec {
        role: Role::Targeted,
        start: config.background_lead,
        bytes: Some(c.length),
        ..FlowSpec::default()
    });
    Ok(background.chain(targeted).collect())
}

/// Turns per-flow rates in bytes per second into the two CSV rows.
pub fn point_rows(n: usize, rep: u32, capacity_bps: f64, flows: &[(Role, f64)]) -> PointResult {
    let sum = |role| flows.iter().filter(|(r, _)| *r == role).map(|(_, x)| x).sum::<f64>();
    let targeted = sum(Role::Targeted);
    let background = sum(Role::Background);
    let total = targeted + background;
    let rates: Vec<f64> = flows.iter().map(|(_, x)| *x).collect();
    let share = |x: f64| if total > 0.0 { x / total } else { 0.0 };
    PointResult {
        throughput: ThroughputRow {
            n,
            rep,
            targeted_bps: targeted * 8.0,
            background_bps: background * 8.0,
            throughput_ratio: targeted * 8.0 / capacity_bps,
        },
        fairness: FairnessRow {
            n,
            rep,
            jfi_per_flow: jain_fairness(&rates).unwrap_or(f64::NAN),
            targeted_share: share(targeted),
            background_share: share(background),
        },
    }
}

/// Traces of one simulated point.
pub fn sim_traces(config: &ExperimentConfig, n: usize, rep: u32) -> Result<Vec<FlowTrace>, HarnessError> {
    let mut link = config.link.clone();
    link.seed = rep_seed(config.link.seed, rep);
    Ok(run_scenario(&link, &sim_flows(config, n)?, config.duration)?)
}

pub fn sim_point(config: &ExperimentConfig, n: usize, rep: u32) -> Result<PointResult, HarnessError> {
    let traces = sim_traces(config, n, rep)?;
    let window = TimeWindow::steady(config.duration);
    let flows =
        traces.iter().map(|t| Ok((t.role, throughput(t, window)?))).collect::<Result<Vec<_>, MetricsError>>()?;
    Ok(point_rows(n, rep, config.link.capacity_bps, &flows))
}

/// Every (level, repetition) pair in output order.
pub fn sweep_points(config: &ExperimentConfig) -> Vec<(usize, u32)> {
    config.levels.iter().flat_map(|&n| (0..config.repetitions).map(move |rep| (n, rep))).collect()
}

pub fn run_sim(config: &ExperimentConfig, execution: Execution) -> Result<ExperimentResult, HarnessError> {
    let points = sweep_points(config);
    let results: Result<Vec<_>, _> = match execution {
        Execution::Sequential => points.iter().map(|&(n, rep)| sim_point(config, n, rep)).collect(),
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            points.par_iter().map(|&(n, rep)| sim_point(config, n, rep)).collect()
        }
    };
    Ok(ExperimentResult::from_points(results?))
}

/// Socket points always run one at a time: concurrent transfers would
/// compete for the same loopback interface.
pub fn run_sockets(config: &ExperimentConfig) -> Result<ExperimentResult, HarnessError> {
    let results =
        sweep_points(config).into_iter().map(|(n, rep)| socket_point(config, n, rep)).collect::<Result<Vec<_>, _>>()?;
    Ok(ExperimentResult::from_points(results))
}

pub fn run_experiment(config: &ExperimentConfig, execution: Execution) -> Result<ExperimentResult, HarnessError> {
    match config.mode {
        Mode::Sim => run_sim(config, execution),
        Mode::Sockets => run_sockets(config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simnet::LinkConfig;

    fn short(levels: Vec<usize>) -> ExperimentConfig {
        ExperimentConfig { levels, duration: 10.0, ..ExperimentConfig::default() }
    }

    #[test]
    fn flows_put_background_first() {
        let c = ExperimentConfig { payload_size: 10, background_flows: 2, ..ExperimentConfig::default() };
        let flows = sim_flows(&c, 3).unwrap();
        let roles: Vec<Role> = flows.iter().map(|f| f.role).collect();
        assert_eq!(roles, [Role::Background, Role::Background, Role::Targeted, Role::Targeted, Role::Targeted]);
        let bytes: Vec<_> = flows[2..].iter().map(|f| f.bytes.unwrap()).collect();
        assert_eq!(bytes, [4, 3, 3]);
        assert!(flows[2..].iter().all(|f| f.start == 1.0));
    }

    #[test]
    fn single_stream_point_equals_direct_scenario() {
        let c = short(vec![1]);
        let row = sim_point(&c, 1, 0).unwrap();
        let flows = [
            FlowSpec::greedy(Role::Background, 0.0),
            FlowSpec { start: 1.0, bytes: Some(c.payload_size), ..FlowSpec::default() },
        ];
        let traces = run_scenario(&c.link, &flows, 10.0).unwrap();
        let direct = throughput(&traces[1], TimeWindow::steady(10.0)).unwrap() * 8.0;
        assert_eq!(row.throughput.targeted_bps, direct);
    }

    #[test]
    fn rows_use_bits_and_capacity() {
        let p = point_rows(2, 0, 1000.0, &[(Role::Background, 25.0), (Role::Targeted, 50.0), (Role::Targeted, 25.0)]);
        assert_eq!(p.throughput.targeted_bps, 600.0);
        assert_eq!(p.throughput.background_bps, 200.0);
        assert_eq!(p.throughput.throughput_ratio, 0.6);
        assert_eq!(p.fairness.targeted_share, 0.75);
        assert_eq!(p.fairness.background_share, 0.25);
        assert!((p.fairness.jfi_per_flow - 10000.0 / (3.0 * 3750.0)).abs() < 1e-12);
        let idle = point_rows(1, 0, 1000.0, &[(Role::Targeted, 0.0)]);
        assert!(idle.fairness.jfi_per_flow.is_nan());
    }

    #[test]
    fn repetitions_change_the_seed_only() {
        let c = ExperimentConfig {
            repetitions: 2,
            link: LinkConfig { loss_probability: 0.02, ..LinkConfig::default() },
            ..short(vec![2])
        };
        let r = run_sim(&c, Execution::Sequential).unwrap();
        assert_eq!(r.throughput.len(), 2);
        assert_ne!(r.throughput[0].targeted_bps, r.throughput[1].targeted_bps);
        assert_eq!(sweep_points(&c), vec![(2, 0), (2, 1)]);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_and_sequential_agree() {
        let c = ExperimentConfig { repetitions: 2, ..short(vec![1, 2, 4]) };
        assert_eq!(run_sim(&c, Execution::Parallel).unwrap(), run_sim(&c, Execution::Sequential).unwrap());
    }
}
