//! Striping transport backed by the simulated bottleneck.
//!
//! Each connection is one AIMD flow. Client-to-server bytes are cut into
//! segments and cross the bottleneck; server-to-client bytes take the
//! uncongested reverse path and arrive one propagation delay later.
//!
//! Virtual time only moves when every open client stream is blocked, so a
//! transfer's timing does not depend on how fast the host runs the threads.
//! Whichever blocked client holds the lock drives the event loop and stops
//! as soon as some client can make progress again.

use std::collections::VecDeque;
use std::io;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use super::network::{Network, SEND_BUFFER};
use super::{LinkConfig, SimError, SimTime, DEFAULT_BUCKET};
use crate::metrics::{FlowTrace, Role};
use crate::transport::{Connector, Listener, Stream};

/// A blocked writer resumes once this much buffer space is free (or all it
/// still needs, if less).
const WRITE_RESUME: usize = 16 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Wait {
    Space(usize),
    Reply,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ClientState {
    Running,
    Blocked(Wait),
    Closed,
}

struct State {
    net: Network,
    clients: Vec<ClientState>,
    runnable: usize,
    listening: bool,
    backlog: VecDeque<usize>,
}

impl State {
    fn satisfied(&self, flow: usize, wait: Wait) -> bool {
        let s = self.net.stream(flow);
        match wait {
            Wait::Space(want) => SEND_BUFFER - s.unsent.len() >= want,
            Wait::Reply => !s.reverse_inbox.is_empty() || s.reverse_closed,
        }
    }

    /// Marks every blocked client whose condition now holds as running.
    fn wake_ready(&mut self) {
        for flow in 0..self.clients.len() {
            if let ClientState::Blocked(wait) = self.clients[flow] {
                if self.satisfied(flow, wait) {
                    self.clients[flow] = ClientState::Running;
                    self.runnable += 1;
                }
            }
        }
    }

    /// Executes one event if any is pending, waking whoever it unblocked.
    fn step(&mut self, changed: &Condvar) -> bool {
        if self.net.step().is_none() {
            return false;
        }
        if std::mem::take(&mut self.net.dirty) {
            self.wake_ready();
            changed.notify_all();
        }
        true
    }

    fn set_closed(&mut self, flow: usize) {
        if self.clients[flow] == ClientState::Running {
            self.runnable -= 1;
        }
        self.clients[flow] = ClientState::Closed;
    }
}

struct Shared {
    state: Mutex<State>,
    changed: Condvar,
}

/// A simulated bottleneck that striping can connect through.
#[derive(Clone)]
pub struct SimNet {
    shared: Arc<Shared>,
}

impl SimNet {
    pub fn new(config: LinkConfig) -> Result<Self, SimError> {
        let net = Network::new(config, DEFAULT_BUCKET)?;
        Ok(SimNet {
            shared: Arc::new(Shared {
                state: Mutex::new(State {
                    net,
                    clients: Vec::new(),
                    runnable: 0,
                    listening: false,
                    backlog: VecDeque::new(),
                }),
                changed: Condvar::new(),
            }),
        })
    }

    /// Opens the single accept queue. Connections attempted before this
    /// are refused.
    pub fn listener(&self) -> SimListener {
        self.lock().listening = true;
        SimListener { shared: self.shared.clone() }
    }

    pub fn connector(&self) -> SimConnector {
        self.connector_with_role(Role::Targeted)
    }

    /// Connections from this connector are labelled `role` in traces.
    pub fn connector_with_role(&self, role: Role) -> SimConnector {
        SimConnector { shared: self.shared.clone(), role }
    }

    pub fn now(&self) -> SimTime {
        self.lock().net.now()
    }

    /// Per-connection delivery traces up to `duration` seconds.
    pub fn traces(&self, duration: f64) -> Vec<FlowTrace> {
        self.lock().net.traces(duration)
    }

    /// Total number of segments retransmitted over all connections.
    pub fn retransmissions(&self) -> u64 {
        let state = self.lock();
        (0..state.net.flow_count()).map(|f| state.net.flow_stats(f).retransmissions).sum()
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        lock(&self.shared)
    }
}

fn lock(shared: &Shared) -> MutexGuard<'_, State> {
    shared.state.lock().unwrap_or_else(|e| e.into_inner())
}

pub struct SimConnector {
    shared: Arc<Shared>,
    role: Role,
}

impl Connector for SimConnector {
    type Stream = SimStream;

    fn connect(&self) -> io::Result<SimStream> {
        let mut state = lock(&self.shared);
        if !state.listening {
            return Err(io::Error::new(io::ErrorKind::ConnectionRefused, "no simulated listener"));
        }
        let flow = state.net.add_stream_flow(self.role);
        debug_assert_eq!(flow, state.clients.len());
        state.clients.push(ClientState::Running);
        state.runnable += 1;
        state.backlog.push_back(flow);
        drop(state);
        self.shared.changed.notify_all();
        Ok(SimStream { shared: self.shared.clone(), flow, client: true, timeout: None, closed: false })
    }

    fn now(&self) -> Duration {
        Duration::from_nanos(lock(&self.shared).net.now().as_nanos())
    }
}

pub struct SimListener {
    shared: Arc<Shared>,
}

impl Listener for SimListener {
    type Stream = SimStream;

    fn accept_timeout(&self, timeout: Duration) -> io::Result<Option<SimStream>> {
        let deadline = Instant::now() + timeout;
        let mut state = lock(&self.shared);
        loop {
            if let Some(flow) = state.backlog.pop_front() {
                return Ok(Some(SimStream {
                    shared: self.shared.clone(),
                    flow,
                    client: false,
                    timeout: None,
                    closed: false,
                }));
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Ok(None);
            }
            state = self.shared.changed.wait_timeout(state, left).unwrap_or_else(|e| e.into_inner()).0;
        }
    }
}

/// One end of a simulated connection.
pub struct SimStream {
    shared: Arc<Shared>,
    flow: usize,
    client: bool,
    timeout: Option<Duration>,
    closed: bool,
}

impl SimStream {
    /// Blocks a client until `wait` holds, advancing virtual time when no
    /// other client can run.
    fn block<'a>(&'a self, mut state: MutexGuard<'a, State>, wait: Wait) -> io::Result<MutexGuard<'a, State>> {
        let flow = self.flow;
        if state.satisfied(flow, wait) {
            return Ok(state);
        }
        state.clients[flow] = ClientState::Blocked(wait);
        state.runnable -= 1;
        let deadline = self.timeout.map(|t| Instant::now() + t);
        loop {
            if state.clients[flow] == ClientState::Running {
                return Ok(state);
            }
            if state.runnable == 0 && state.step(&self.shared.changed) {
                continue;
            }
            let left = match deadline {
                Some(d) => {
                    let left = d.saturating_duration_since(Instant::now());
                    if left.is_zero() {
                        state.clients[flow] = ClientState::Running;
                        state.runnable += 1;
                        return Err(io::ErrorKind::TimedOut.into());
                    }
                    left
                }
                None => Duration::from_secs(3600),
            };
            state = self.shared.changed.wait_timeout(state, left).unwrap_or_else(|e| e.into_inner()).0;
        }
    }

    fn wait_server<'a>(&'a self, mut state: MutexGuard<'a, State>) -> io::Result<MutexGuard<'a, State>> {
        let deadline = self.timeout.map(|t| Instant::now() + t);
        loop {
            let s = state.net.stream(self.flow);
            if !s.inbox.is_empty() || state.net.stream_drained(self.flow) {
                return Ok(state);
            }
            if state.runnable == 0 && state.step(&self.shared.changed) {
                continue;
            }
            if state.net.stream(self.flow).client_gone && state.runnable == 0 {
                return Err(io::ErrorKind::ConnectionReset.into());
            }
            let left = match deadline {
                Some(d) => d.saturating_duration_since(Instant::now()),
                None => Duration::from_secs(3600),
            };
            if left.is_zero() {
                return Err(io::ErrorKind::TimedOut.into());
            }
            state = self.shared.changed.wait_timeout(state, left).unwrap_or_else(|e| e.into_inner()).0;
        }
    }
}

fn drain_into(queue: &mut VecDeque<u8>, buf: &mut [u8]) -> usize {
    let n = queue.len().min(buf.len());
    for (dst, src) in buf.iter_mut().zip(queue.drain(..n)) {
        *dst = src;
    }
    n
}

impl Stream for SimStream {
    fn read_some(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if buf.is_empty() {
            return Ok(0);
        }
        let state = lock(&self.shared);
        if self.client {
            let mut state = self.block(state, Wait::Reply)?;
            Ok(drain_into(&mut state.net.stream_mut(self.flow).reverse_inbox, buf))
        } else {
            let mut state = self.wait_server(state)?;
            Ok(drain_into(&mut state.net.stream_mut(self.flow).inbox, buf))
        }
    }

    fn write_all(&mut self, mut buf: &[u8]) -> io::Result<()> {
        if self.closed {
            return Err(io::Error::new(io::ErrorKind::BrokenPipe, "write after close"));
        }
        let mut state = lock(&self.shared);
        if !self.client {
            if state.net.stream(self.flow).client_gone {
                return Err(io::ErrorKind::BrokenPipe.into());
            }
            state.net.send_reverse(self.flow, buf.to_vec());
            drop(state);
            self.shared.changed.notify_all();
            return Ok(());
        }
        while !buf.is_empty() {
            if state.net.stream(self.flow).server_gone {
                return Err(io::ErrorKind::BrokenPipe.into());
            }
            let s = state.net.stream_mut(self.flow);
            let room = SEND_BUFFER - s.unsent.len();
            let n = room.min(buf.len());
            s.unsent.extend(&buf[..n]);
            buf = &buf[n..];
            state.net.try_send(self.flow);
            state.net.dirty = false;
            if !buf.is_empty() {
                let want = buf.len().min(WRITE_RESUME);
                state = self.block(state, Wait::Space(want))?;
            }
        }
        Ok(())
    }

    fn close(&mut self) -> io::Result<()> {
        if self.closed {
            return Ok(());
        }
        self.closed = true;
        let mut state = lock(&self.shared);
        if self.client {
            state.net.stream_mut(self.flow).write_closed = true;
        } else {
            state.net.stream_mut(self.flow).server_closed = true;
            state.net.close_reverse(self.flow);
        }
        drop(state);
        self.shared.changed.notify_all();
        Ok(())
    }

    fn set_read_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()> {
        self.timeout = timeout;
        Ok(())
    }
}

impl Drop for SimStream {
    fn drop(&mut self) {
        let mut state = lock(&self.shared);
        if self.client {
            state.net.stream_mut(self.flow).client_gone = true;
            state.set_closed(self.flow);
        } else {
            let s = state.net.stream_mut(self.flow);
            s.server_gone = true;
            if !s.server_closed {
                s.server_closed = true;
                state.net.close_reverse(self.flow);
            }
        }
        drop(state);
        self.shared.changed.notify_all();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::read_exact;

    #[test]
    fn connect_without_listener_is_refused() {
        let net = SimNet::new(LinkConfig::default()).unwrap();
        let err = net.connector().connect().err().unwrap();
        assert_eq!(err.kind(), io::ErrorKind::ConnectionRefused);
    }

    #[test]
    fn bytes_cross_in_both_directions() {
        let net = SimNet::new(LinkConfig::default()).unwrap();
        let listener = net.listener();
        let connector = net.connector();
        let mut client = connector.connect().unwrap();
        let mut server = listener.accept_timeout(Duration::from_secs(1)).unwrap().unwrap();
        server.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
        std::thread::scope(|scope| {
            scope.spawn(move || {
                let mut got = vec![0; 100_000];
                read_exact(&mut server, &mut got).unwrap();
                assert!(got.iter().enumerate().all(|(i, &b)| b == i as u8));
                let mut rest = [0u8; 1];
                assert_eq!(server.read_some(&mut rest).unwrap(), 0);
                server.write_all(b"done").unwrap();
                server.close().unwrap();
            });
            let data: Vec<u8> = (0..100_000).map(|i| i as u8).collect();
            client.write_all(&data).unwrap();
            client.close().unwrap();
            let mut reply = [0u8; 4];
            read_exact(&mut client, &mut reply).unwrap();
            assert_eq!(&reply, b"done");
            assert_eq!(client.read_some(&mut reply).unwrap(), 0);
        });
        // 100 kB at 10 Mbit/s takes at least 80 ms of virtual time.
        assert!(net.now().as_secs_f64() > 0.08 + 0.1);
    }
}
