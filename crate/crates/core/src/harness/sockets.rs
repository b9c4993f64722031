use std::io::{self, Write};
use std::net::{SocketAddr, TcpStream};
use std::ops::ControlFlow;
use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;
use std::time::Duration;

use rand::{RngCore, SeedableRng};

use super::{point_rows, rep_seed, ExperimentConfig, HarnessError, PointResult};
use crate::metrics::Role;
use crate::striping::{
    send_transfer, serve_with, FailureKind, Outcome, PayloadSink, ReceiverConfig, ServeEvent, TransferReport,
};
use crate::transport::{TcpAcceptor, TcpConnector};
use crate::wire::TransferId;

/// Verifies and discards payloads.
struct Discard;

impl PayloadSink for Discard {
    fn store(&mut self, _: TransferId, _: &[u8]) -> io::Result<()> {
        Ok(())
    }
}

fn check(report: &TransferReport) -> Result<(), HarnessError> {
    match &report.outcome {
        Outcome::Success => Ok(()),
        Outcome::Failure(f) if f.kind == FailureKind::Connect => {
            Err(HarnessError::Network(io::Error::new(io::ErrorKind::ConnectionRefused, f.message.clone())))
        }
        Outcome::Failure(f) => Err(HarnessError::TransferFailed(format!("chunk {}: {}", f.chunk_index, f.message))),
    }
}

/// Makes a waiting receiver notice `abort` by handing it a connection it
/// rejects.
fn interrupt(addr: SocketAddr) {
    if let Ok(mut s) = TcpStream::connect(addr) {
        let _ = s.write_all(b"stop");
    }
}

fn rate(bytes: u64, elapsed: Duration) -> f64 {
    let secs = elapsed.as_secs_f64();
    if secs > 0.0 {
        bytes as f64 / secs
    } else {
        0.0
    }
}

/// One point over loopback TCP: the background transfers start first, the
/// targeted striped transfer follows after the configured lead, and a single
/// receiver verifies all of them. Each transfer's rate is its bytes over its
/// own wall time.
pub fn socket_point(config: &ExperimentConfig, n: usize, rep: u32) -> Result<PointResult, HarnessError> {
    let mut payload = vec![0u8; config.payload_size as usize];
    rand::rngs::StdRng::seed_from_u64(rep_seed(config.link.seed, rep)).fill_bytes(&mut payload);

    let acceptor = TcpAcceptor::bind(&config.listen).map_err(HarnessError::Network)?;
    let addr = acceptor.local_addr().map_err(HarnessError::Network)?;
    let connector = TcpConnector::new(addr).map_err(HarnessError::Network)?;
    let expected = config.background_flows + 1;
    let abort = AtomicBool::new(false);

    thread::scope(|s| {
        let receiver = s.spawn(|| {
            let mut done = 0;
            let mut failure = None;
            serve_with(&acceptor, &mut Discard, &ReceiverConfig::default(), |event| {
                match event {
                    ServeEvent::Completed(_) => done += 1,
                    ServeEvent::Failed { error, .. } => failure = Some(error.to_string()),
                    ServeEvent::ConnectionError(_) => {}
                }
                if done == expected || failure.is_some() || abort.load(Ordering::SeqCst) {
                    ControlFlow::Break(())
                } else {
                    ControlFlow::Continue(())
                }
            })
            .map_err(|e| HarnessError::TransferFailed(e.to_string()))?;
            failure.map_or(Ok(()), |f| Err(HarnessError::TransferFailed(f)))
        });

        let background: Vec<_> =
            (0..config.background_flows).map(|_| s.spawn(|| send_transfer(&payload, &connector, 1))).collect();
        thread::sleep(Duration::from_secs_f64(config.background_lead));
        let targeted = send_transfer(&payload, &connector, n).map_err(|e| HarnessError::TransferFailed(e.to_string()));
        let background: Vec<_> = background.into_iter().map(|h| h.join().expect("sender thread panicked")).collect();

        let senders = (|| -> Result<_, HarnessError> {
            let targeted = targeted?;
            check(&targeted)?;
            let mut flows: Vec<(Role, f64)> = Vec::new();
            for report in background {
                let report = report.map_err(|e| HarnessError::TransferFailed(e.to_string()))?;
                check(&report)?;
                flows.push((Role::Background, rate(report.bytes_sent, report.wall_time)));
            }
            Ok((targeted, flows))
        })();
        if senders.is_err() {
            abort.store(true, Ordering::SeqCst);
            interrupt(addr);
        }
        let received = receiver.join().expect("receiver thread panicked");
        let (targeted, mut flows) = senders?;
        received?;

        // Targeted flows are reported per connection so the per-flow index sees them.
        let aggregate = rate(targeted.bytes_sent, targeted.wall_time);
        let per_conn: Vec<f64> =
            targeted.per_connection.iter().map(|c| rate(c.bytes, c.end.saturating_sub(c.start))).collect();
        let conn_sum: f64 = per_conn.iter().sum();
        // Scale so connection rates add up to the transfer's goodput.
        let scale = if conn_sum > 0.0 { aggregate / conn_sum } else { 0.0 };
        flows.extend(per_conn.into_iter().map(|x| (Role::Targeted, x * scale)));
        Ok(point_rows(n, rep, config.link.capacity_bps, &flows))
    })
}
