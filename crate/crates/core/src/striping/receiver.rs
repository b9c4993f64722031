use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::ops::ControlFlow;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread::{self, Scope};
use std::time::{Duration, Instant};

use crate::transport::{Listener, Stream};
use crate::wire::{chunk_of, encode_frame, partition, Digest, Frame, FrameDecoder, Hello, TransferId};

use super::{assemble, StripeError};

#[derive(Debug, Clone)]
pub struct ReceiverConfig {
    /// A transfer (or an unregistered connection) that sees no frame for this
    /// long fails as stalled.
    pub idle_timeout: Duration,
    /// Largest payload a single transfer may buffer in memory.
    pub memory_cap: u64,
    /// Granularity of accept polling and stop checks.
    pub poll_interval: Duration,
}

impl Default for ReceiverConfig {
    fn default() -> Self {
        ReceiverConfig {
            idle_timeout: Duration::from_secs(30),
            memory_cap: 256 * 1024 * 1024,
            poll_interval: Duration::from_millis(20),
        }
    }
}

/// Where finished payloads go.
pub trait PayloadSink {
    fn store(&mut self, transfer_id: TransferId, payload: &[u8]) -> io::Result<()>;
}

#[derive(Debug, Default)]
pub struct MemorySink {
    pub payloads: BTreeMap<TransferId, Vec<u8>>,
}

impl PayloadSink for MemorySink {
    fn store(&mut self, transfer_id: TransferId, payload: &[u8]) -> io::Result<()> {
        self.payloads.insert(transfer_id, payload.to_vec());
        Ok(())
    }
}

/// Writes each payload to `<dir>/<transfer_id in hex>`.
#[derive(Debug, Clone)]
pub struct DirSink {
    dir: PathBuf,
}

impl DirSink {
    pub fn new(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(DirSink { dir })
    }

    pub fn path_for(&self, transfer_id: TransferId) -> PathBuf {
        self.dir.join(transfer_id.to_string())
    }
}

impl PayloadSink for DirSink {
    fn store(&mut self, transfer_id: TransferId, payload: &[u8]) -> io::Result<()> {
        let path = self.path_for(transfer_id);
        let partial = path.with_extension("part");
        fs::write(&partial, payload)?;
        fs::rename(partial, path)
    }
}

#[derive(Debug, Clone)]
pub struct ReceivedTransfer {
    pub transfer_id: TransferId,
    pub total_size: u64,
    pub connection_count: u32,
    pub payload_digest: Digest,
    /// From the first HELLO to the payload being stored.
    pub elapsed: Duration,
}

#[derive(Debug)]
pub enum ServeEvent {
    Completed(ReceivedTransfer),
    Failed {
        transfer_id: TransferId,
        error: StripeError,
    },
    /// A connection misbehaved before it could be tied to a transfer.
    ConnectionError(StripeError),
}

/// Serves until the first transfer finishes, successfully or not.
pub fn serve<L: Listener>(
    listener: &L,
    sink: &mut dyn PayloadSink,
    config: &ReceiverConfig,
) -> Result<ReceivedTransfer, StripeError> {
    let mut first = None;
    serve_with(listener, sink, config, |event| {
        first = Some(event);
        ControlFlow::Break(())
    })?;
    match first {
        Some(ServeEvent::Completed(done)) => Ok(done),
        Some(ServeEvent::Failed { error, .. }) | Some(ServeEvent::ConnectionError(error)) => Err(error),
        None => Err(StripeError::Protocol("receiver stopped without a transfer".into())),
    }
}

/// Accepts streams and reassembles transfers until `on_event` breaks.
///
/// The calling thread runs the monitor; a scoped thread runs the accept loop
/// and spawns one worker per stream. Returns once every worker has exited.
pub fn serve_with<L, F>(
    listener: &L,
    sink: &mut dyn PayloadSink,
    config: &ReceiverConfig,
    on_event: F,
) -> Result<(), StripeError>
where
    L: Listener,
    F: FnMut(ServeEvent) -> ControlFlow<()>,
{
    let stop = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel();
    thread::scope(|scope| {
        let stop = &stop;
        scope.spawn(move || accept_loop(scope, listener, tx, stop, config));
        let mut monitor =
            Monitor { transfers: BTreeMap::new(), finished: BTreeSet::new(), sink, config, stop, on_event };
        monitor.run(rx);
    });
    Ok(())
}

fn accept_loop<'scope, L: Listener>(
    scope: &'scope Scope<'scope, '_>,
    listener: &'scope L,
    tx: Sender<Signal>,
    stop: &'scope AtomicBool,
    config: &'scope ReceiverConfig,
) {
    while !stop.load(Ordering::Acquire) {
        match listener.accept_timeout(config.poll_interval) {
            Ok(Some(stream)) => {
                let worker = Worker { tx: tx.clone(), stop, config };
                scope.spawn(move || worker.run(stream));
            }
            Ok(None) => {}
            Err(e) => {
                let _ = tx.send(Signal::ConnectionError(e.into()));
                thread::sleep(config.poll_interval);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Verdict {
    Accepted,
    Finalized,
    Rejected,
}

enum Signal {
    Register { hello: Hello, reply: Sender<Verdict> },
    Progress { transfer_id: TransferId },
    Complete { transfer_id: TransferId, index: u32, bytes: Vec<u8> },
    Fail { transfer_id: TransferId, error: StripeError },
    ConnectionError(StripeError),
}

struct TransferState {
    template: Hello,
    waiters: BTreeMap<u32, Sender<Verdict>>,
    completed: BTreeMap<u32, Vec<u8>>,
    started: Instant,
    last_activity: Instant,
}

struct Monitor<'a, F> {
    transfers: BTreeMap<TransferId, TransferState>,
    /// Transfers that already completed or failed; late connections are turned away.
    finished: BTreeSet<TransferId>,
    sink: &'a mut dyn PayloadSink,
    config: &'a ReceiverConfig,
    stop: &'a AtomicBool,
    on_event: F,
}

impl<F: FnMut(ServeEvent) -> ControlFlow<()>> Monitor<'_, F> {
    fn run(&mut self, rx: Receiver<Signal>) {
        loop {
            match rx.recv_timeout(self.config.poll_interval) {
                Ok(signal) => self.handle(signal),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => break,
            }
            let stalled: Vec<TransferId> = self
                .transfers
                .iter()
                .filter(|(_, t)| t.last_activity.elapsed() >= self.config.idle_timeout)
                .map(|(id, _)| *id)
                .collect();
            for transfer_id in stalled {
                self.fail(transfer_id, StripeError::Stalled { transfer_id: Some(transfer_id) });
            }
        }
    }

    fn stopping(&self) -> bool {
        self.stop.load(Ordering::Acquire)
    }

    fn emit(&mut self, event: ServeEvent) {
        if self.stopping() {
            return;
        }
        if (self.on_event)(event).is_break() {
            self.stop.store(true, Ordering::Release);
        }
    }

    fn handle(&mut self, signal: Signal) {
        match signal {
            Signal::Register { hello, reply } => self.register(hello, reply),
            Signal::Progress { transfer_id } => {
                if let Some(t) = self.transfers.get_mut(&transfer_id) {
                    t.last_activity = Instant::now();
                }
            }
            Signal::Complete { transfer_id, index, bytes } => {
                let Some(t) = self.transfers.get_mut(&transfer_id) else {
                    return;
                };
                t.last_activity = Instant::now();
                t.completed.insert(index, bytes);
                if t.completed.len() as u64 == u64::from(t.template.connection_count) {
                    self.finalize(transfer_id);
                }
            }
            Signal::Fail { transfer_id, error } => self.fail(transfer_id, error),
            Signal::ConnectionError(error) => self.emit(ServeEvent::ConnectionError(error)),
        }
    }

    fn register(&mut self, hello: Hello, reply: Sender<Verdict>) {
        let id = hello.transfer_id;
        if self.stopping() || self.finished.contains(&id) {
            let _ = reply.send(Verdict::Rejected);
            return;
        }
        let Some(state) = self.transfers.get_mut(&id) else {
            if hello.total_size > self.config.memory_cap {
                let _ = reply.send(Verdict::Rejected);
                self.finished.insert(id);
                self.emit(ServeEvent::Failed {
                    transfer_id: id,
                    error: StripeError::TooLarge {
                        transfer_id: id,
                        total_size: hello.total_size,
                        cap: self.config.memory_cap,
                    },
                });
                return;
            }
            let now = Instant::now();
            let _ = reply.send(Verdict::Accepted);
            self.transfers.insert(
                id,
                TransferState {
                    waiters: BTreeMap::from([(hello.chunk_index, reply)]),
                    template: hello,
                    completed: BTreeMap::new(),
                    started: now,
                    last_activity: now,
                },
            );
            return;
        };
        let problem = if !state.template.same_transfer_as(&hello) {
            Some(format!("connection for chunk {} disagrees with the transfer's HELLO", hello.chunk_index))
        } else if state.waiters.contains_key(&hello.chunk_index) {
            Some(format!("chunk index {} registered twice", hello.chunk_index))
        } else {
            None
        };
        match problem {
            Some(reason) => {
                let _ = reply.send(Verdict::Rejected);
                self.fail(id, StripeError::Protocol(reason));
            }
            None => {
                state.last_activity = Instant::now();
                state.waiters.insert(hello.chunk_index, reply);
                let _ = state.waiters[&hello.chunk_index].send(Verdict::Accepted);
            }
        }
    }

    fn fail(&mut self, transfer_id: TransferId, error: StripeError) {
        let Some(state) = self.transfers.remove(&transfer_id) else {
            return;
        };
        for reply in state.waiters.values() {
            let _ = reply.send(Verdict::Rejected);
        }
        self.finished.insert(transfer_id);
        self.emit(ServeEvent::Failed { transfer_id, error });
    }

    fn finalize(&mut self, transfer_id: TransferId) {
        let state = &self.transfers[&transfer_id];
        let h = &state.template;
        let result = partition(h.total_size, h.connection_count)
            .map_err(StripeError::from)
            .and_then(|layout| assemble(&state.completed, &layout, h.total_size))
            .and_then(|payload| {
                if Digest::of(&payload) != h.payload_digest {
                    return Err(StripeError::CorruptPayload { transfer_id });
                }
                self.sink.store(transfer_id, &payload).map_err(StripeError::Sink)
            });
        match result {
            Ok(()) => {
                let state = self.transfers.remove(&transfer_id).expect("finalizing a live transfer");
                for reply in state.waiters.values() {
                    let _ = reply.send(Verdict::Finalized);
                }
                self.finished.insert(transfer_id);
                self.emit(ServeEvent::Completed(ReceivedTransfer {
                    transfer_id,
                    total_size: state.template.total_size,
                    connection_count: state.template.connection_count,
                    payload_digest: state.template.payload_digest,
                    elapsed: state.started.elapsed(),
                }));
            }
            Err(error) => self.fail(transfer_id, error),
        }
    }
}

enum Exit {
    /// The receiver is shutting down or the monitor turned the stream away.
    Quiet,
    Error(StripeError),
}

impl From<StripeError> for Exit {
    fn from(e: StripeError) -> Self {
        Exit::Error(e)
    }
}

struct Worker<'a> {
    tx: Sender<Signal>,
    stop: &'a AtomicBool,
    config: &'a ReceiverConfig,
}

struct FrameReader<'a, S> {
    stream: S,
    decoder: FrameDecoder,
    scratch: Vec<u8>,
    stop: &'a AtomicBool,
    config: &'a ReceiverConfig,
}

impl<S: Stream> FrameReader<'_, S> {
    /// Next frame, or `None` at end of stream.
    fn next(&mut self) -> Result<Option<Frame>, Exit> {
        let mut idle = Duration::ZERO;
        loop {
            if let Some(frame) = self.decoder.next_frame().map_err(StripeError::from)? {
                return Ok(Some(frame));
            }
            match self.stream.read_some(&mut self.scratch) {
                Ok(0) => {
                    if self.decoder.pending().is_empty() {
                        return Ok(None);
                    }
                    return Err(StripeError::Protocol("stream ended mid-frame".into()).into());
                }
                Ok(n) => {
                    idle = Duration::ZERO;
                    self.decoder.push(&self.scratch[..n]);
                }
                Err(e) if e.kind() == io::ErrorKind::TimedOut => {
                    if self.stop.load(Ordering::Acquire) {
                        return Err(Exit::Quiet);
                    }
                    idle += self.config.poll_interval;
                    if idle >= self.config.idle_timeout {
                        return Err(StripeError::Stalled { transfer_id: None }.into());
                    }
                }
                Err(e) => return Err(StripeError::Io(e).into()),
            }
        }
    }
}

impl Worker<'_> {
    fn run<S: Stream>(self, mut stream: S) {
        if let Err(e) = stream.set_read_timeout(Some(self.config.poll_interval)) {
            let _ = self.tx.send(Signal::ConnectionError(e.into()));
            return;
        }
        let mut reader = FrameReader {
            stream,
            decoder: FrameDecoder::new(),
            scratch: vec![0u8; 64 * 1024],
            stop: self.stop,
            config: self.config,
        };
        let hello = match reader.next() {
            Ok(Some(Frame::Hello(hello))) => hello,
            Ok(None) | Err(Exit::Quiet) => return,
            Ok(Some(other)) => {
                let kind = match other {
                    Frame::Data(_) => "DATA",
                    _ => "FIN",
                };
                let err = StripeError::Protocol(format!("{kind} frame before HELLO"));
                let _ = self.tx.send(Signal::ConnectionError(err));
                return;
            }
            Err(Exit::Error(e)) => {
                let _ = self.tx.send(Signal::ConnectionError(e));
                return;
            }
        };
        if let Err(e) = validate_hello(&hello) {
            let _ = self.tx.send(Signal::ConnectionError(e));
            return;
        }

        let transfer_id = hello.transfer_id;
        let (reply, verdicts) = mpsc::channel();
        let fin = hello.chunk_index;
        if self.tx.send(Signal::Register { hello: hello.clone(), reply }).is_err() {
            return;
        }
        if self.await_verdict(&verdicts) != Some(Verdict::Accepted) {
            return;
        }
        match self.receive_chunk(&mut reader, &hello, &verdicts) {
            Ok(bytes) => {
                let digest = Digest::of(&bytes);
                let _ = self.tx.send(Signal::Complete { transfer_id, index: fin, bytes });
                if self.await_verdict(&verdicts) == Some(Verdict::Finalized) {
                    let echo = Frame::Fin(crate::wire::Fin { chunk_index: fin, chunk_digest: digest });
                    let bytes = encode_frame(&echo).expect("FIN always encodes");
                    let _ = reader.stream.write_all(&bytes);
                    let _ = reader.stream.close();
                }
            }
            Err(Exit::Quiet) => {}
            Err(Exit::Error(error)) => {
                let error = match error {
                    StripeError::Stalled { .. } => StripeError::Stalled { transfer_id: Some(transfer_id) },
                    other => other,
                };
                let _ = self.tx.send(Signal::Fail { transfer_id, error });
            }
        }
    }

    fn await_verdict(&self, verdicts: &Receiver<Verdict>) -> Option<Verdict> {
        loop {
            match verdicts.recv_timeout(self.config.poll_interval) {
                Ok(v) => return Some(v),
                Err(RecvTimeoutError::Timeout) if !self.stop.load(Ordering::Acquire) => {}
                Err(_) => return None,
            }
        }
    }

    fn receive_chunk<S: Stream>(
        &self,
        reader: &mut FrameReader<'_, S>,
        hello: &Hello,
        verdicts: &Receiver<Verdict>,
    ) -> Result<Vec<u8>, Exit> {
        let index = hello.chunk_index;
        let mut chunk = Vec::with_capacity(hello.chunk_length as usize);
        loop {
            if let Ok(Verdict::Rejected) = verdicts.try_recv() {
                return Err(Exit::Quiet);
            }
            let frame = reader.next()?.ok_or(StripeError::Truncated { index })?;
            match frame {
                Frame::Data(data) => {
                    if data.chunk_index != index {
                        return Err(protocol(format!(
                            "DATA for chunk {} on the connection carrying chunk {index}",
                            data.chunk_index
                        )));
                    }
                    if data.offset_in_chunk != chunk.len() as u64 {
                        return Err(protocol(format!(
                            "chunk {index}: DATA at offset {} but {} bytes received",
                            data.offset_in_chunk,
                            chunk.len()
                        )));
                    }
                    if chunk.len() as u64 + data.payload.len() as u64 > hello.chunk_length {
                        return Err(protocol(format!("chunk {index}: DATA overruns the chunk length")));
                    }
                    chunk.extend_from_slice(&data.payload);
                    let _ = self.tx.send(Signal::Progress { transfer_id: hello.transfer_id });
                }
                Frame::Fin(fin) => {
                    if fin.chunk_index != index {
                        return Err(protocol(format!("FIN for chunk {} on chunk {index}", fin.chunk_index)));
                    }
                    if chunk.len() as u64 != hello.chunk_length {
                        return Err(StripeError::Truncated { index }.into());
                    }
                    if Digest::of(&chunk) != fin.chunk_digest {
                        return Err(StripeError::CorruptChunk { transfer_id: hello.transfer_id, index }.into());
                    }
                    return Ok(chunk);
                }
                Frame::Hello(_) => return Err(protocol(format!("second HELLO on chunk {index}"))),
            }
        }
    }
}

fn protocol(reason: String) -> Exit {
    Exit::Error(StripeError::Protocol(reason))
}

fn validate_hello(hello: &Hello) -> Result<(), StripeError> {
    if hello.connection_count == 0 || hello.chunk_index >= hello.connection_count {
        return Err(StripeError::Protocol(format!(
            "chunk index {} outside a {}-connection transfer",
            hello.chunk_index, hello.connection_count
        )));
    }
    let expected = chunk_of(hello.total_size, hello.connection_count, hello.chunk_index);
    if hello.assignment() != expected {
        return Err(StripeError::Protocol(format!(
            "chunk {} claims offset {} length {}, expected offset {} length {}",
            hello.chunk_index, hello.chunk_offset, hello.chunk_length, expected.offset, expected.length
        )));
    }
    Ok(())
}
