use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand_xoshiro::rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

use super::aimd::AimdFlowState;
use super::time::{EventQueue, SimTime};
use super::{FlowSpec, LinkConfig, SimError};
use crate::metrics::{FlowTrace, Role};

/// Bytes an application may queue on a simulated stream before writes block.
pub(crate) const SEND_BUFFER: usize = 64 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    FlowStart,
    /// The bottleneck finished serializing a packet.
    ServiceDone,
    /// A data segment reached the receiver.
    Arrive,
    /// An acknowledgement reached the sender.
    Ack,
    /// A retransmission timer expired.
    LossTimer,
    ForcedLoss,
    /// Application bytes on the uncongested reverse path reached the sender.
    ReverseData,
    ReverseClose,
}

/// What one call to [`Network::step`] did.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventRecord {
    pub time: SimTime,
    pub kind: EventKind,
    pub flow: Option<usize>,
    pub seq: Option<u64>,
}

#[derive(Debug)]
enum Event {
    FlowStart(usize),
    ServiceDone,
    Arrive(Packet),
    Ack(Packet),
    LossTimer(Packet),
    ForcedLoss(Vec<usize>),
    ReverseData { flow: usize, bytes: Vec<u8> },
    ReverseClose { flow: usize },
}

#[derive(Debug, Clone, Copy)]
struct Packet {
    flow: usize,
    seq: u64,
    tx: u32,
}

/// Link-level counters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LinkStats {
    /// Data packets offered to the bottleneck.
    pub offered: u64,
    pub dropped_queue: u64,
    pub dropped_random: u64,
    /// Segments dropped at the sender by a deterministic window cap.
    pub dropped_forced: u64,
    pub max_queue: usize,
    pub acks_sent: u64,
    pub acks_delivered: u64,
}

/// Per-flow counters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlowStats {
    /// Distinct bytes handed to the network (first transmissions only).
    pub sent_bytes: u64,
    pub delivered_bytes: u64,
    pub transmissions: u64,
    pub retransmissions: u64,
    pub losses_detected: u64,
    pub window_reductions: u64,
    pub completed_at: Option<SimTime>,
}

#[derive(Debug)]
struct Segment {
    len: u32,
    tx: u32,
    data: Option<Vec<u8>>,
}

/// Byte-stream endpoints layered on a flow by the simulated transport.
#[derive(Debug, Default)]
pub(crate) struct StreamState {
    /// Written by the client, not yet cut into segments.
    pub unsent: VecDeque<u8>,
    pub write_closed: bool,
    /// Delivered in order to the server side.
    pub inbox: VecDeque<u8>,
    /// Server-to-client bytes that crossed the reverse path.
    pub reverse_inbox: VecDeque<u8>,
    pub reverse_closed: bool,
    pub server_closed: bool,
    pub client_gone: bool,
    pub server_gone: bool,
}

#[derive(Debug)]
enum Source {
    Bulk { remaining: Option<u64> },
    Stream(StreamState),
}

#[derive(Debug)]
struct Flow {
    spec: FlowSpec,
    cc: AimdFlowState,
    started: bool,
    source: Source,
    /// Unacknowledged segments, in flight or awaiting retransmission.
    segments: BTreeMap<u64, Segment>,
    /// In flight: sequence number to send time.
    outstanding: BTreeMap<u64, SimTime>,
    /// Declared lost, waiting to be resent (lowest first).
    lost: BTreeSet<u64>,
    rcv_next: u64,
    rcv_ooo: BTreeMap<u64, (u32, Option<Vec<u8>>)>,
    trace: Vec<u64>,
    stats: FlowStats,
}

/// A dumbbell: every sender feeds one drop-tail bottleneck queue, every
/// receiver acknowledges over a lossless reverse path.
///
/// Loss happens on the forward path only: a packet offered to the bottleneck
/// is first subject to a Bernoulli drop with the configured probability
/// (one draw per offered packet, skipped entirely when the probability is
/// zero), then to tail drop if `queue_limit` packets are already waiting
/// behind the one in service. Random draws come from SplitMix64 seeded with
/// `LinkConfig::seed`; the uniform variate is the top 53 bits of the next
/// output scaled by 2^-53, and a packet is dropped when it is below the loss
/// probability.
///
/// A sender learns of a drop when the segment's timer expires `2 * rtt_base`
/// after transmission, where `rtt_base` is twice the one-way delay plus one
/// packet's serialization time. Every packet occupies a full MSS on the wire.
pub struct Network {
    config: LinkConfig,
    now: SimTime,
    events: EventQueue<Event>,
    rng: SplitMix64,
    waiting: VecDeque<Packet>,
    in_service: Option<Packet>,
    serialization: SimTime,
    delay: SimTime,
    loss_timeout: SimTime,
    bucket_width: f64,
    flows: Vec<Flow>,
    stats: LinkStats,
    /// Set when an event changed something a blocked stream user may wait on.
    pub(crate) dirty: bool,
}

impl Network {
    pub fn new(config: LinkConfig, bucket_width: f64) -> Result<Self, SimError> {
        config.validate()?;
        if !(bucket_width > 0.0 && bucket_width.is_finite()) {
            return Err(SimError::InvalidArgument(format!("bucket width {bucket_width} must be positive")));
        }
        let serialization = SimTime::from_secs_f64(config.mss as f64 * 8.0 / config.capacity_bps).max(SimTime(1));
        let delay = SimTime::from_secs_f64(config.one_way_delay);
        let rtt = SimTime(2 * delay.0 + serialization.0);
        Ok(Network {
            rng: SplitMix64::seed_from_u64(config.seed),
            config,
            now: SimTime::ZERO,
            events: EventQueue::default(),
            waiting: VecDeque::new(),
            in_service: None,
            serialization,
            delay,
            loss_timeout: SimTime(2 * rtt.0),
            bucket_width,
            flows: Vec::new(),
            stats: LinkStats::default(),
            dirty: false,
        })
    }

    pub fn config(&self) -> &LinkConfig {
        &self.config
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Base round trip in seconds: both propagation delays plus one
    /// serialization time.
    pub fn rtt_base(&self) -> f64 {
        (self.delay + self.delay + self.serialization).as_secs_f64()
    }

    pub fn serialization_time(&self) -> SimTime {
        self.serialization
    }

    pub fn stats(&self) -> &LinkStats {
        &self.stats
    }

    pub fn flow_count(&self) -> usize {
        self.flows.len()
    }

    pub fn flow_state(&self, flow: usize) -> &AimdFlowState {
        &self.flows[flow].cc
    }

    pub fn flow_stats(&self, flow: usize) -> &FlowStats {
        &self.flows[flow].stats
    }

    pub fn queue_len(&self) -> usize {
        self.waiting.len()
    }

    pub fn has_pending_events(&self) -> bool {
        !self.events.is_empty()
    }

    pub fn next_event_time(&self) -> Option<SimTime> {
        self.events.peek_time()
    }

    /// Adds a bulk flow that starts at `spec.start`.
    pub fn add_flow(&mut self, spec: FlowSpec) -> Result<usize, SimError> {
        spec.validate()?;
        let remaining = spec.bytes;
        self.push_flow(spec, Source::Bulk { remaining })
    }

    pub(crate) fn add_stream_flow(&mut self, role: Role) -> usize {
        let spec = FlowSpec { role, start: self.now.as_secs_f64(), ..FlowSpec::default() };
        let id = self.flows.len();
        let mut flow = self.new_flow(id, spec, Source::Stream(StreamState::default()));
        flow.started = true;
        self.flows.push(flow);
        id
    }

    fn push_flow(&mut self, spec: FlowSpec, source: Source) -> Result<usize, SimError> {
        let id = self.flows.len();
        let start = SimTime::from_secs_f64(spec.start).max(self.now);
        let flow = self.new_flow(id, spec, source);
        self.flows.push(flow);
        self.events.push(start, Event::FlowStart(id));
        Ok(id)
    }

    fn new_flow(&self, id: usize, spec: FlowSpec, source: Source) -> Flow {
        let mut cc = AimdFlowState::new(id, self.rtt_base());
        cc.slow_start = spec.slow_start;
        Flow {
            spec,
            cc,
            started: false,
            source,
            segments: BTreeMap::new(),
            outstanding: BTreeMap::new(),
            lost: BTreeSet::new(),
            rcv_next: 0,
            rcv_ooo: BTreeMap::new(),
            trace: Vec::new(),
            stats: FlowStats::default(),
        }
    }

    /// Schedules a congestion signal on `flows`, all at the same instant.
    pub fn schedule_forced_loss(&mut self, at: f64, flows: Vec<usize>) {
        let at = SimTime::from_secs_f64(at).max(self.now);
        self.events.push(at, Event::ForcedLoss(flows));
    }

    /// Pops and executes one event.
    pub fn step(&mut self) -> Option<EventRecord> {
        let (at, event) = self.events.pop()?;
        debug_assert!(at >= self.now, "time went backwards");
        self.now = at;
        let record = |kind, flow, seq| EventRecord { time: at, kind, flow, seq };
        Some(match event {
            Event::FlowStart(f) => {
                self.flows[f].started = true;
                self.try_send(f);
                record(EventKind::FlowStart, Some(f), None)
            }
            Event::ServiceDone => {
                let pkt = self.in_service.take().expect("service completion without a packet");
                self.events.push(self.now + self.delay, Event::Arrive(pkt));
                if let Some(next) = self.waiting.pop_front() {
                    self.start_service(next);
                }
                record(EventKind::ServiceDone, Some(pkt.flow), Some(pkt.seq))
            }
            Event::Arrive(pkt) => {
                self.on_arrive(pkt);
                record(EventKind::Arrive, Some(pkt.flow), Some(pkt.seq))
            }
            Event::Ack(pkt) => {
                self.on_ack(pkt);
                record(EventKind::Ack, Some(pkt.flow), Some(pkt.seq))
            }
            Event::LossTimer(pkt) => {
                self.on_timer(pkt);
                record(EventKind::LossTimer, Some(pkt.flow), Some(pkt.seq))
            }
            Event::ForcedLoss(flows) => {
                for &f in &flows {
                    let rtt = SimTime::from_secs_f64(self.flows[f].cc.rtt_base);
                    let sent_at = self.now.saturating_sub(rtt);
                    if self.flows[f].cc.on_loss(self.now, sent_at) {
                        self.flows[f].stats.window_reductions += 1;
                    }
                }
                record(EventKind::ForcedLoss, None, None)
            }
            Event::ReverseData { flow, bytes } => {
                if let Source::Stream(s) = &mut self.flows[flow].source {
                    if !s.client_gone {
                        s.reverse_inbox.extend(bytes);
                    }
                }
                self.dirty = true;
                record(EventKind::ReverseData, Some(flow), None)
            }
            Event::ReverseClose { flow } => {
                if let Source::Stream(s) = &mut self.flows[flow].source {
                    s.reverse_closed = true;
                }
                self.dirty = true;
                record(EventKind::ReverseClose, Some(flow), None)
            }
        })
    }

    /// Executes every event scheduled at or before `until`, then advances the
    /// clock to `until`.
    pub fn run_until(&mut self, until: SimTime) {
        while self.events.peek_time().is_some_and(|t| t <= until) {
            self.step();
        }
        self.now = self.now.max(until);
    }

    /// Per-flow delivered-bytes traces covering `[0, duration)`.
    pub fn traces(&self, duration: f64) -> Vec<FlowTrace> {
        let buckets = (duration / self.bucket_width - 1e-9).ceil().max(0.0) as usize;
        self.flows
            .iter()
            .enumerate()
            .map(|(id, f)| {
                let mut b = f.trace.clone();
                b.resize(buckets, 0);
                FlowTrace { flow_id: id, role: f.spec.role, bucket_width: self.bucket_width, buckets: b }
            })
            .collect()
    }

    fn start_service(&mut self, pkt: Packet) {
        self.in_service = Some(pkt);
        self.events.push(self.now + self.serialization, Event::ServiceDone);
    }

    fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Offers a data packet to the bottleneck. Returns false if it was dropped.
    fn offer(&mut self, pkt: Packet) -> bool {
        self.stats.offered += 1;
        let p = self.config.loss_probability;
        if p > 0.0 && self.uniform() < p {
            self.stats.dropped_random += 1;
            return false;
        }
        if self.in_service.is_none() {
            self.start_service(pkt);
        } else if self.waiting.len() >= self.config.queue_limit {
            self.stats.dropped_queue += 1;
            return false;
        } else {
            self.waiting.push_back(pkt);
            self.stats.max_queue = self.stats.max_queue.max(self.waiting.len());
        }
        true
    }

    /// Cuts the next new segment from the flow's source, if any.
    fn next_segment(&mut self, f: usize) -> Option<Segment> {
        let mss = self.config.mss as u64;
        match &mut self.flows[f].source {
            Source::Bulk { remaining } => {
                let len = match remaining {
                    None => mss,
                    Some(0) => return None,
                    Some(r) => {
                        let len = (*r).min(mss);
                        *r -= len;
                        len
                    }
                };
                Some(Segment { len: len as u32, tx: 0, data: None })
            }
            Source::Stream(s) => {
                if s.unsent.is_empty() {
                    return None;
                }
                let len = s.unsent.len().min(mss as usize);
                let data: Vec<u8> = s.unsent.drain(..len).collect();
                self.dirty = true;
                Some(Segment { len: len as u32, tx: 0, data: Some(data) })
            }
        }
    }

    /// Sends while the window allows: retransmissions first, then new data.
    pub(crate) fn try_send(&mut self, f: usize) {
        while self.flows[f].started && self.flows[f].cc.can_send() {
            let seq = if let Some(seq) = self.flows[f].lost.pop_first() {
                self.flows[f].stats.retransmissions += 1;
                seq
            } else if let Some(segment) = self.next_segment(f) {
                let flow = &mut self.flows[f];
                let seq = flow.cc.next_seq;
                flow.cc.next_seq += 1;
                flow.stats.sent_bytes += segment.len as u64;
                flow.segments.insert(seq, segment);
                seq
            } else {
                break;
            };
            let now = self.now;
            let flow = &mut self.flows[f];
            let segment = flow.segments.get_mut(&seq).expect("unacked segment has a body");
            segment.tx += 1;
            let pkt = Packet { flow: f, seq, tx: segment.tx };
            flow.outstanding.insert(seq, now);
            flow.cc.in_flight += 1;
            flow.stats.transmissions += 1;

            if flow.spec.loss_at_window.is_some_and(|w| flow.cc.cwnd >= w) {
                // Deterministic cap: drop this segment and signal the loss at once.
                flow.outstanding.remove(&seq);
                flow.cc.in_flight -= 1;
                flow.lost.insert(seq);
                flow.stats.losses_detected += 1;
                if flow.cc.on_loss(now, now) {
                    flow.stats.window_reductions += 1;
                }
                self.stats.dropped_forced += 1;
                continue;
            }
            self.events.push(now + self.loss_timeout, Event::LossTimer(pkt));
            self.offer(pkt);
        }
    }

    fn on_arrive(&mut self, pkt: Packet) {
        let now = self.now;
        let bucket = (now.as_secs_f64() / self.bucket_width) as usize;
        let flow = &mut self.flows[pkt.flow];
        if pkt.seq >= flow.rcv_next && !flow.rcv_ooo.contains_key(&pkt.seq) {
            let seg = flow.segments.get_mut(&pkt.seq).expect("arriving segment has a body");
            flow.rcv_ooo.insert(pkt.seq, (seg.len, seg.data.take()));
            while let Some((len, data)) = flow.rcv_ooo.remove(&flow.rcv_next) {
                flow.rcv_next += 1;
                flow.cc.delivered += len as u64;
                flow.stats.delivered_bytes += len as u64;
                if flow.trace.len() <= bucket {
                    flow.trace.resize(bucket + 1, 0);
                }
                flow.trace[bucket] += len as u64;
                match &mut flow.source {
                    Source::Stream(s) => {
                        if let Some(d) = data {
                            s.inbox.extend(d);
                        }
                        self.dirty = true;
                    }
                    Source::Bulk { remaining: Some(0) } => {
                        if flow.rcv_next == flow.cc.next_seq && flow.stats.completed_at.is_none() {
                            flow.stats.completed_at = Some(now);
                        }
                    }
                    Source::Bulk { .. } => {}
                }
            }
        }
        self.stats.acks_sent += 1;
        self.events.push(now + self.delay, Event::Ack(pkt));
    }

    fn on_ack(&mut self, pkt: Packet) {
        self.stats.acks_delivered += 1;
        let flow = &mut self.flows[pkt.flow];
        if flow.outstanding.remove(&pkt.seq).is_some() {
            flow.cc.on_ack(pkt.seq);
            flow.segments.remove(&pkt.seq);
        } else if flow.lost.remove(&pkt.seq) {
            // The timer fired early; the data got through after all.
            flow.segments.remove(&pkt.seq);
        }
        self.try_send(pkt.flow);
    }

    fn on_timer(&mut self, pkt: Packet) {
        let now = self.now;
        let flow = &mut self.flows[pkt.flow];
        let current = flow.segments.get(&pkt.seq).is_some_and(|s| s.tx == pkt.tx);
        if !current {
            return;
        }
        let Some(sent_at) = flow.outstanding.remove(&pkt.seq) else {
            return;
        };
        flow.cc.in_flight -= 1;
        flow.lost.insert(pkt.seq);
        flow.stats.losses_detected += 1;
        if flow.cc.on_loss(now, sent_at) {
            flow.stats.window_reductions += 1;
        }
        self.try_send(pkt.flow);
    }

    // ── Stream access for the simulated transport ─────────────────────────

    pub(crate) fn stream(&self, flow: usize) -> &StreamState {
        match &self.flows[flow].source {
            Source::Stream(s) => s,
            Source::Bulk { .. } => panic!("flow {flow} is not a stream"),
        }
    }

    pub(crate) fn stream_mut(&mut self, flow: usize) -> &mut StreamState {
        match &mut self.flows[flow].source {
            Source::Stream(s) => s,
            Source::Bulk { .. } => panic!("flow {flow} is not a stream"),
        }
    }

    /// Whether the server side has seen every byte the client wrote, after
    /// the client closed.
    pub(crate) fn stream_drained(&self, flow: usize) -> bool {
        let f = &self.flows[flow];
        let s = self.stream(flow);
        s.write_closed && s.unsent.is_empty() && f.rcv_next == f.cc.next_seq
    }

    pub(crate) fn send_reverse(&mut self, flow: usize, bytes: Vec<u8>) {
        self.events.push(self.now + self.delay, Event::ReverseData { flow, bytes });
    }

    pub(crate) fn close_reverse(&mut self, flow: usize) {
        self.events.push(self.now + self.delay, Event::ReverseClose { flow });
    }
}
