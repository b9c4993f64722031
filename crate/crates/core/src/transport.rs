//! The seam between striping and whatever carries its bytes.
//!
//! A [`Connector`] opens reliable, ordered, duplex byte streams; a
//! [`Listener`] accepts them. Three backends live in this crate: OS TCP
//! sockets ([`TcpConnector`], [`TcpAcceptor`]), an in-memory pipe pair for
//! tests ([`MemNetwork`]), and the simulated bottleneck in
//! [`crate::simnet::SimNet`]. [`Delayed`] wraps any connector and slows
//! individual streams.

use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

/// Blocking byte stream with TCP semantics.
pub trait Stream: Send {
    /// Reads at least one byte, or returns 0 at end of stream. A read that
    /// waits longer than the configured timeout fails with
    /// [`io::ErrorKind::TimedOut`].
    fn read_some(&mut self, buf: &mut [u8]) -> io::Result<usize>;
    fn write_all(&mut self, buf: &[u8]) -> io::Result<()>;
    /// Half-closes the write direction.
    fn close(&mut self) -> io::Result<()>;
    fn set_read_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()>;
}

pub trait Connector: Sync {
    type Stream: Stream + 'static;

    fn connect(&self) -> io::Result<Self::Stream>;

    /// Time on the clock the transport runs on (wall clock for sockets,
    /// virtual time for simulation).
    fn now(&self) -> Duration;
}

pub trait Listener: Sync {
    type Stream: Stream + 'static;

    /// Waits up to `timeout` for a new stream.
    fn accept_timeout(&self, timeout: Duration) -> io::Result<Option<Self::Stream>>;
}

/// Fills `buf` completely or fails with `UnexpectedEof`.
pub fn read_exact<S: Stream + ?Sized>(stream: &mut S, mut buf: &mut [u8]) -> io::Result<()> {
    while !buf.is_empty() {
        let n = stream.read_some(buf)?;
        if n == 0 {
            return Err(io::ErrorKind::UnexpectedEof.into());
        }
        buf = &mut buf[n..];
    }
    Ok(())
}

fn timed_out(err: io::Error) -> io::Error {
    match err.kind() {
        io::ErrorKind::WouldBlock => io::Error::new(io::ErrorKind::TimedOut, err),
        _ => err,
    }
}

// ── OS sockets ────────────────────────────────────────────────────────────

pub struct TcpConnector {
    addr: SocketAddr,
    epoch: Instant,
}

impl TcpConnector {
    pub fn new(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let addr = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "address resolved to nothing"))?;
        Ok(TcpConnector { addr, epoch: Instant::now() })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Connector for TcpConnector {
    type Stream = TcpStream;

    fn connect(&self) -> io::Result<TcpStream> {
        let stream = TcpStream::connect(self.addr)?;
        stream.set_nodelay(true)?;
        Ok(stream)
    }

    fn now(&self) -> Duration {
        self.epoch.elapsed()
    }
}

impl Stream for TcpStream {
    fn read_some(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        loop {
            match Read::read(self, buf) {
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                other => return other.map_err(timed_out),
            }
        }
    }

    fn write_all(&mut self, buf: &[u8]) -> io::Result<()> {
        Write::write_all(self, buf)
    }

    fn close(&mut self) -> io::Result<()> {
        match self.shutdown(Shutdown::Write) {
            Err(e) if e.kind() == io::ErrorKind::NotConnected => Ok(()),
            other => other,
        }
    }

    fn set_read_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()> {
        TcpStream::set_read_timeout(self, timeout)
    }
}

pub struct TcpAcceptor {
    listener: TcpListener,
}

impl TcpAcceptor {
    pub fn bind(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        Ok(TcpAcceptor { listener })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }
}

const ACCEPT_POLL: Duration = Duration::from_millis(2);

impl Listener for TcpAcceptor {
    type Stream = TcpStream;

    fn accept_timeout(&self, timeout: Duration) -> io::Result<Option<TcpStream>> {
        let deadline = Instant::now() + timeout;
        loop {
            match self.listener.accept() {
                Ok((stream, _)) => {
                    stream.set_nonblocking(false)?;
                    stream.set_nodelay(true)?;
                    return Ok(Some(stream));
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    let now = Instant::now();
                    if now >= deadline {
                        return Ok(None);
                    }
                    std::thread::sleep(ACCEPT_POLL.min(deadline - now));
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e),
            }
        }
    }
}

// ── In-memory pipes ───────────────────────────────────────────────────────

#[derive(Default)]
struct PipeState {
    data: VecDeque<u8>,
    closed: bool,
}

#[derive(Default)]
struct Pipe {
    state: Mutex<PipeState>,
    ready: Condvar,
}

impl Pipe {
    fn write(&self, buf: &[u8]) -> io::Result<()> {
        let mut st = self.state.lock().unwrap();
        if st.closed {
            return Err(io::ErrorKind::BrokenPipe.into());
        }
        st.data.extend(buf);
        self.ready.notify_all();
        Ok(())
    }

    fn close(&self) {
        self.state.lock().unwrap().closed = true;
        self.ready.notify_all();
    }

    fn read(&self, buf: &mut [u8], timeout: Option<Duration>) -> io::Result<usize> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut st = self.state.lock().unwrap();
        loop {
            if !st.data.is_empty() {
                let n = buf.len().min(st.data.len());
                for (dst, src) in buf.iter_mut().zip(st.data.drain(..n)) {
                    *dst = src;
                }
                return Ok(n);
            }
            if st.closed {
                return Ok(0);
            }
            st = match deadline {
                None => self.ready.wait(st).unwrap(),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Err(io::ErrorKind::TimedOut.into());
                    }
                    self.ready.wait_timeout(st, d - now).unwrap().0
                }
            };
        }
    }
}

/// One end of an in-memory duplex stream.
pub struct MemStream {
    rx: Arc<Pipe>,
    tx: Arc<Pipe>,
    timeout: Option<Duration>,
}

impl MemStream {
    /// A connected pair of streams.
    pub fn pair() -> (MemStream, MemStream) {
        let a = Arc::new(Pipe::default());
        let b = Arc::new(Pipe::default());
        (MemStream { rx: a.clone(), tx: b.clone(), timeout: None }, MemStream { rx: b, tx: a, timeout: None })
    }
}

impl Stream for MemStream {
    fn read_some(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        self.rx.read(buf, self.timeout)
    }

    fn write_all(&mut self, buf: &[u8]) -> io::Result<()> {
        self.tx.write(buf)
    }

    fn close(&mut self) -> io::Result<()> {
        self.tx.close();
        Ok(())
    }

    fn set_read_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()> {
        self.timeout = timeout;
        Ok(())
    }
}

impl Drop for MemStream {
    fn drop(&mut self) {
        self.tx.close();
    }
}

#[derive(Default)]
struct Backlog {
    pending: Mutex<VecDeque<MemStream>>,
    ready: Condvar,
}

/// An in-process "network" with a single listening endpoint.
#[derive(Clone)]
pub struct MemNetwork {
    backlog: Arc<Backlog>,
    epoch: Instant,
}

impl Default for MemNetwork {
    fn default() -> Self {
        MemNetwork { backlog: Arc::default(), epoch: Instant::now() }
    }
}

impl MemNetwork {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn listener(&self) -> MemListener {
        MemListener { backlog: self.backlog.clone() }
    }
}

impl Connector for MemNetwork {
    type Stream = MemStream;

    fn connect(&self) -> io::Result<MemStream> {
        let (client, server) = MemStream::pair();
        self.backlog.pending.lock().unwrap().push_back(server);
        self.backlog.ready.notify_all();
        Ok(client)
    }

    fn now(&self) -> Duration {
        self.epoch.elapsed()
    }
}

pub struct MemListener {
    backlog: Arc<Backlog>,
}

impl Listener for MemListener {
    type Stream = MemStream;

    fn accept_timeout(&self, timeout: Duration) -> io::Result<Option<MemStream>> {
        let pending = self.backlog.pending.lock().unwrap();
        let (mut pending, _) = self.backlog.ready.wait_timeout_while(pending, timeout, |p| p.is_empty()).unwrap();
        Ok(pending.pop_front())
    }
}

// ── Adversarial delays ────────────────────────────────────────────────────

/// Per-write delay as a function of (stream number in connect order, bytes
/// already written on that stream).
pub type DelayPolicy = dyn Fn(usize, u64) -> Duration + Send + Sync;

/// Wraps a connector so that writes on selected streams are slowed down.
pub struct Delayed<C> {
    inner: C,
    policy: Arc<DelayPolicy>,
    opened: Mutex<usize>,
}

impl<C: Connector> Delayed<C> {
    pub fn new(inner: C, policy: impl Fn(usize, u64) -> Duration + Send + Sync + 'static) -> Self {
        Delayed { inner, policy: Arc::new(policy), opened: Mutex::new(0) }
    }
}

impl<C: Connector> Connector for Delayed<C> {
    type Stream = DelayedStream<C::Stream>;

    fn connect(&self) -> io::Result<Self::Stream> {
        let mut opened = self.opened.lock().unwrap();
        let inner = self.inner.connect()?;
        let number = *opened;
        *opened += 1;
        Ok(DelayedStream { inner, number, written: 0, policy: self.policy.clone() })
    }

    fn now(&self) -> Duration {
        self.inner.now()
    }
}

pub struct DelayedStream<S> {
    inner: S,
    number: usize,
    written: u64,
    policy: Arc<DelayPolicy>,
}

impl<S: Stream> Stream for DelayedStream<S> {
    fn read_some(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        self.inner.read_some(buf)
    }

    fn write_all(&mut self, buf: &[u8]) -> io::Result<()> {
        let pause = (self.policy)(self.number, self.written);
        if !pause.is_zero() {
            std::thread::sleep(pause);
        }
        self.written += buf.len() as u64;
        self.inner.write_all(buf)
    }

    fn close(&mut self) -> io::Result<()> {
        self.inner.close()
    }

    fn set_read_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()> {
        self.inner.set_read_timeout(timeout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mem_pair_is_duplex_and_half_closes() {
        let (mut a, mut b) = MemStream::pair();
        a.write_all(b"ping").unwrap();
        a.close().unwrap();
        let mut buf = [0u8; 4];
        read_exact(&mut b, &mut buf).unwrap();
        assert_eq!(&buf, b"ping");
        assert_eq!(b.read_some(&mut buf).unwrap(), 0);
        b.write_all(b"pong").unwrap();
        read_exact(&mut a, &mut buf).unwrap();
        assert_eq!(&buf, b"pong");
    }

    #[test]
    fn mem_read_times_out() {
        let (mut a, _b) = MemStream::pair();
        a.set_read_timeout(Some(Duration::from_millis(10))).unwrap();
        let err = a.read_some(&mut [0u8; 1]).unwrap_err();
        assert_eq!(err.kind(), io::ErrorKind::TimedOut);
    }

    #[test]
    fn mem_listener_accepts_in_connect_order() {
        let net = MemNetwork::new();
        let listener = net.listener();
        assert!(listener.accept_timeout(Duration::from_millis(1)).unwrap().is_none());
        let mut c1 = net.connect().unwrap();
        let mut c2 = net.connect().unwrap();
        c1.write_all(b"1").unwrap();
        c2.write_all(b"2").unwrap();
        let mut s1 = listener.accept_timeout(Duration::ZERO).unwrap().unwrap();
        let mut buf = [0u8; 1];
        s1.read_some(&mut buf).unwrap();
        assert_eq!(&buf, b"1");
    }

    #[test]
    fn tcp_timeout_maps_to_timed_out() {
        let acceptor = TcpAcceptor::bind("127.0.0.1:0").unwrap();
        let connector = TcpConnector::new(acceptor.local_addr().unwrap()).unwrap();
        let mut client = connector.connect().unwrap();
        let _server = acceptor.accept_timeout(Duration::from_secs(5)).unwrap().unwrap();
        Stream::set_read_timeout(&mut client, Some(Duration::from_millis(20))).unwrap();
        let err = client.read_some(&mut [0u8; 8]).unwrap_err();
        assert_eq!(err.kind(), io::ErrorKind::TimedOut);
    }

    #[test]
    fn delayed_numbers_streams_by_connect_order() {
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        let net = MemNetwork::new();
        let delayed = Delayed::new(net, move |n, _| {
            log.lock().unwrap().push(n);
            Duration::ZERO
        });
        let mut a = delayed.connect().unwrap();
        let mut b = delayed.connect().unwrap();
        b.write_all(b"x").unwrap();
        a.write_all(b"y").unwrap();
        assert_eq!(*seen.lock().unwrap(), vec![1, 0]);
    }
}
