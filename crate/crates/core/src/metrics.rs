//! Throughput, throughput ratio and Jain's fairness index over per-flow
//! delivered-bytes traces.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("fairness is undefined when every throughput is zero")]
    UndefinedFairness,
}

/// Which application a flow belongs to: the striped transfer being measured,
/// or the competing single-connection traffic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Targeted,
    Background,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Targeted => "targeted",
            Role::Background => "background",
        })
    }
}

/// Bytes delivered to one flow's receiver, bucketed by arrival time.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTrace {
    pub flow_id: usize,
    pub role: Role,
    /// Seconds per bucket.
    pub bucket_width: f64,
    /// Bucket `i` covers `[i * bucket_width, (i + 1) * bucket_width)`.
    pub buckets: Vec<u64>,
}

impl FlowTrace {
    pub fn extent(&self) -> f64 {
        self.buckets.len() as f64 * self.bucket_width
    }

    pub fn total_bytes(&self) -> u64 {
        self.buckets.iter().sum()
    }

    /// Sums several traces sharing one bucket width into a single trace.
    pub fn merge(flow_id: usize, role: Role, traces: &[&FlowTrace]) -> Result<FlowTrace, MetricsError> {
        let width = traces
            .first()
            .map(|t| t.bucket_width)
            .ok_or_else(|| MetricsError::InvalidArgument("nothing to merge".into()))?;
        if traces.iter().any(|t| t.bucket_width != width) {
            return Err(MetricsError::InvalidArgument("bucket widths differ".into()));
        }
        let len = traces.iter().map(|t| t.buckets.len()).max().unwrap_or(0);
        let mut buckets = vec![0u64; len];
        for t in traces {
            for (acc, b) in buckets.iter_mut().zip(&t.buckets) {
                *acc += b;
            }
        }
        Ok(FlowTrace { flow_id, role, bucket_width: width, buckets })
    }
}

/// Half-open measurement interval `[start, end)` in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeWindow {
    pub start: f64,
    pub end: f64,
}

/// Share of each run discarded as ramp-up before measuring.
pub const WARMUP_FRACTION: f64 = 0.2;

impl TimeWindow {
    pub fn new(start: f64, end: f64) -> Self {
        TimeWindow { start, end }
    }

    /// The run minus its first [`WARMUP_FRACTION`].
    pub fn steady(duration: f64) -> Self {
        TimeWindow { start: duration * WARMUP_FRACTION, end: duration }
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }
}

/// Mean delivery rate over `window` in bytes per second. Buckets that
/// straddle a window edge contribute in proportion to their overlap.
pub fn throughput(trace: &FlowTrace, window: TimeWindow) -> Result<f64, MetricsError> {
    if window.length().is_nan() || window.length() <= 0.0 {
        return Err(MetricsError::InvalidArgument(format!("empty window [{}, {})", window.start, window.end)));
    }
    if trace.bucket_width.is_nan() || trace.bucket_width <= 0.0 {
        return Err(MetricsError::InvalidArgument("bucket width must be positive".into()));
    }
    let extent = trace.extent();
    let tolerance = trace.bucket_width * 1e-9;
    if window.start < -tolerance || window.end > extent + tolerance {
        return Err(MetricsError::InvalidArgument(format!(
            "window [{}, {}) outside trace extent [0, {extent})",
            window.start, window.end
        )));
    }
    let w = trace.bucket_width;
    let first = (window.start / w).floor().max(0.0) as usize;
    let last = ((window.end / w).ceil() as usize).min(trace.buckets.len());
    let mut bytes = 0.0;
    for i in first..last {
        let lo = i as f64 * w;
        let hi = lo + w;
        let overlap = (hi.min(window.end) - lo.max(window.start)).max(0.0);
        bytes += trace.buckets[i] as f64 * (overlap / w);
    }
    Ok(bytes / window.length())
}

/// Achieved rate as a fraction of link capacity (both in bytes per second).
/// Not clamped: measurement-window edges can push it slightly above 1.
pub fn throughput_ratio(achieved: f64, link_capacity: f64) -> Result<f64, MetricsError> {
    if link_capacity.is_nan() || link_capacity <= 0.0 {
        return Err(MetricsError::InvalidArgument(format!("link capacity {link_capacity} must be positive")));
    }
    Ok(achieved / link_capacity)
}

/// Jain's fairness index `(Σx)² / (N·Σx²)`.
pub fn jain_fairness(xs: &[f64]) -> Result<f64, MetricsError> {
    if xs.is_empty() {
        return Err(MetricsError::InvalidArgument("no throughputs given".into()));
    }
    if let Some(bad) = xs.iter().find(|x| **x < 0.0 || !x.is_finite()) {
        return Err(MetricsError::InvalidArgument(format!("throughput {bad} is not a finite nonnegative value")));
    }
    let sum: f64 = xs.iter().sum();
    let sum_sq: f64 = xs.iter().map(|x| x * x).sum();
    if sum_sq == 0.0 {
        return Err(MetricsError::UndefinedFairness);
    }
    Ok((sum * sum / (xs.len() as f64 * sum_sq)).min(1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FairnessReport {
    /// Bytes per second per flow, in trace order.
    pub per_flow_throughput: Vec<f64>,
    pub flow_count: usize,
    /// Jain index across individual flows.
    pub fairness_index: f64,
    /// Aggregate bytes per second per application.
    pub per_application: BTreeMap<Role, f64>,
    /// Jain index across applications (each application's aggregate counts once).
    pub application_fairness: Option<f64>,
    /// Aggregate of all flows as a fraction of capacity.
    pub utilization: f64,
}

impl FairnessReport {
    /// An application's fraction of all delivered bytes.
    pub fn share(&self, role: Role) -> f64 {
        let total: f64 = self.per_application.values().sum();
        if total > 0.0 {
            self.per_application.get(&role).copied().unwrap_or(0.0) / total
        } else {
            0.0
        }
    }
}

/// Per-flow and per-application fairness over `window`. `capacity` is the
/// bottleneck rate in bytes per second.
pub fn fairness_report(
    traces: &[FlowTrace],
    window: TimeWindow,
    capacity: f64,
) -> Result<FairnessReport, MetricsError> {
    let per_flow_throughput = traces.iter().map(|t| throughput(t, window)).collect::<Result<Vec<_>, _>>()?;
    let fairness_index = jain_fairness(&per_flow_throughput)?;
    let mut per_application = BTreeMap::new();
    for (trace, x) in traces.iter().zip(&per_flow_throughput) {
        *per_application.entry(trace.role).or_insert(0.0) += x;
    }
    let apps: Vec<f64> = per_application.values().copied().collect();
    let application_fairness = if apps.len() >= 2 { jain_fairness(&apps).ok() } else { None };
    let utilization = throughput_ratio(per_flow_throughput.iter().sum(), capacity)?;
    Ok(FairnessReport {
        flow_count: traces.len(),
        per_flow_throughput,
        fairness_index,
        per_application,
        application_fairness,
        utilization,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform(role: Role, rate_per_bucket: u64, buckets: usize) -> FlowTrace {
        FlowTrace { flow_id: 0, role, bucket_width: 0.5, buckets: vec![rate_per_bucket; buckets] }
    }

    #[test]
    fn throughput_over_whole_trace() {
        let trace = FlowTrace { flow_id: 0, role: Role::Targeted, bucket_width: 1.0, buckets: vec![100_000; 10] };
        assert_eq!(throughput(&trace, TimeWindow::new(0.0, 10.0)).unwrap(), 100_000.0);
    }

    #[test]
    fn zero_trace_has_zero_throughput() {
        let trace = uniform(Role::Targeted, 0, 8);
        assert_eq!(throughput(&trace, TimeWindow::new(0.0, 4.0)).unwrap(), 0.0);
    }

    #[test]
    fn half_window_of_uniform_trace() {
        // 1000 bytes per 0.5 s bucket is 2000 B/s everywhere.
        let trace = uniform(Role::Targeted, 1000, 20);
        assert!((throughput(&trace, TimeWindow::new(5.0, 10.0)).unwrap() - 2000.0).abs() < 1e-9);
        // Edges that cut buckets are prorated.
        assert!((throughput(&trace, TimeWindow::new(0.25, 3.1)).unwrap() - 2000.0).abs() < 1e-9);
    }

    #[test]
    fn bad_windows_are_rejected() {
        let trace = uniform(Role::Targeted, 1, 4);
        assert!(throughput(&trace, TimeWindow::new(1.0, 1.0)).is_err());
        assert!(throughput(&trace, TimeWindow::new(0.0, 3.0)).is_err());
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(throughput_ratio(625_000.0, 1_250_000.0).unwrap(), 0.5);
        assert_eq!(throughput_ratio(0.0, 1_250_000.0).unwrap(), 0.0);
        assert!(throughput_ratio(1.0, 0.0).is_err());
        assert!(throughput_ratio(1.0, -5.0).is_err());
        // Not clamped.
        assert!(throughput_ratio(1.1, 1.0).unwrap() > 1.0);
    }

    #[test]
    fn jain_examples() {
        assert_eq!(jain_fairness(&[5.0, 5.0, 5.0, 5.0]).unwrap(), 1.0);
        assert_eq!(jain_fairness(&[1.0, 0.0, 0.0, 0.0]).unwrap(), 0.25);
        assert!((jain_fairness(&[1.0, 2.0, 3.0]).unwrap() - 36.0 / 42.0).abs() < 1e-12);
        assert_eq!(jain_fairness(&[0.0, 0.0]), Err(MetricsError::UndefinedFairness));
        assert!(matches!(jain_fairness(&[1.0, -1.0]), Err(MetricsError::InvalidArgument(_))));
        assert!(matches!(jain_fairness(&[]), Err(MetricsError::InvalidArgument(_))));
    }

    #[test]
    fn report_granularities() {
        let mut traces: Vec<FlowTrace> = (0..4).map(|_| uniform(Role::Targeted, 500, 10)).collect();
        traces.push(uniform(Role::Background, 500, 10));
        let report = fairness_report(&traces, TimeWindow::steady(5.0), 5000.0).unwrap();
        assert_eq!(report.flow_count, 5);
        assert!((report.fairness_index - 1.0).abs() < 1e-12);
        assert!((report.per_application[&Role::Targeted] - 4000.0).abs() < 1e-9);
        assert!((report.per_application[&Role::Background] - 1000.0).abs() < 1e-9);
        assert!((report.share(Role::Targeted) - 0.8).abs() < 1e-12);
        assert!((report.utilization - 1.0).abs() < 1e-12);
    }

    #[test]
    fn three_to_one_split() {
        let traces = vec![uniform(Role::Targeted, 300, 4), uniform(Role::Background, 100, 4)];
        let report = fairness_report(&traces, TimeWindow::new(0.0, 2.0), 1000.0).unwrap();
        assert!((report.fairness_index - 0.8).abs() < 1e-12);
    }

    #[test]
    fn single_pair_equal_shares() {
        let traces = vec![uniform(Role::Targeted, 7, 4), uniform(Role::Background, 7, 4)];
        let report = fairness_report(&traces, TimeWindow::new(0.0, 2.0), 100.0).unwrap();
        assert_eq!(report.fairness_index, 1.0);
        assert_eq!(report.application_fairness, Some(1.0));
    }

    proptest! {
        #[test]
        fn scale_invariance(xs in prop::collection::vec(0.0f64..1e6, 1..16), c in 1e-3f64..1e3) {
            prop_assume!(xs.iter().any(|x| *x > 0.0));
            let scaled: Vec<f64> = xs.iter().map(|x| x * c).collect();
            let a = jain_fairness(&xs).unwrap();
            let b = jain_fairness(&scaled).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn bounds(xs in prop::collection::vec(0.0f64..1e9, 1..16)) {
            prop_assume!(xs.iter().any(|x| *x > 0.0));
            let f = jain_fairness(&xs).unwrap();
            let n = xs.len() as f64;
            prop_assert!(f >= 1.0 / n - 1e-12 && f <= 1.0);
        }

        #[test]
        fn equal_entries_are_perfectly_fair(x in 1e-6f64..1e9, n in 1usize..16) {
            prop_assert!((jain_fairness(&vec![x; n]).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn throughput_is_additive(
            a in prop::collection::vec(0u64..100_000, 1..40),
            b in prop::collection::vec(0u64..100_000, 1..40),
            lo in 0.0f64..0.5,
            hi in 0.5f64..1.0,
        ) {
            let ta = FlowTrace { flow_id: 0, role: Role::Targeted, bucket_width: 0.1, buckets: a };
            let tb = FlowTrace { flow_id: 1, role: Role::Targeted, bucket_width: 0.1, buckets: b };
            let merged = FlowTrace::merge(2, Role::Targeted, &[&ta, &tb]).unwrap();
            let extent = ta.extent().min(tb.extent());
            let window = TimeWindow::new(lo * extent, hi * extent);
            prop_assume!(window.length() > 0.0);
            let sum = throughput(&ta, window).unwrap() + throughput(&tb, window).unwrap();
            let whole = throughput(&merged, window).unwrap();
            prop_assert!((sum - whole).abs() <= 1e-9 * whole.max(1.0));
        }
    }
}
