use std::ops::ControlFlow;
use std::thread;
use std::time::Duration;

use ptcp::striping::{
    send_transfer, send_transfer_with, serve, serve_with, FailureKind, MemorySink, Outcome, ReceiverConfig,
    SendOptions, ServeEvent, StripeError,
};
use ptcp::transport::{Connector, Delayed, MemNetwork, Stream, TcpAcceptor, TcpConnector};
use ptcp::wire::{encode_frame, Data, Digest, Fin, Frame, TransferId, TransferManifest};
use rand::{Rng, SeedableRng};

fn payload(len: usize, seed: u64) -> Vec<u8> {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let mut buf = vec![0u8; len];
    rng.fill(&mut buf[..]);
    buf
}

fn quick_config() -> ReceiverConfig {
    ReceiverConfig {
        idle_timeout: Duration::from_secs(5),
        poll_interval: Duration::from_millis(5),
        ..ReceiverConfig::default()
    }
}

/// Runs one transfer through an in-memory network and returns the receiver's copy.
fn round_trip<C, F>(data: &[u8], n: usize, wrap: F) -> (ptcp::striping::TransferReport, Vec<u8>)
where
    C: Connector,
    F: FnOnce(MemNetwork) -> C,
{
    let net = MemNetwork::new();
    let listener = net.listener();
    let connector = wrap(net);
    let mut sink = MemorySink::default();
    let (report, received) = thread::scope(|s| {
        let rx = s.spawn(|| serve(&listener, &mut sink, &quick_config()));
        let report = send_transfer(data, &connector, n).unwrap();
        (report, rx.join().unwrap())
    });
    let received = received.unwrap();
    assert_eq!(received.transfer_id, report.transfer_id);
    let bytes = sink.payloads.remove(&report.transfer_id).unwrap();
    (report, bytes)
}

#[test]
fn one_mebibyte_over_four_streams() {
    let data = payload(1 << 20, 1);
    let (report, got) = round_trip(&data, 4, |net| net);
    assert!(report.is_success());
    assert_eq!(report.bytes_sent, data.len() as u64);
    assert_eq!(report.per_connection.len(), 4);
    assert_eq!(Digest::of(&got), Digest::of(&data));
}

#[test]
fn empty_payload_over_two_streams() {
    let (report, got) = round_trip(&[], 2, |net| net);
    assert!(report.is_success());
    assert_eq!(report.per_connection.iter().map(|r| r.bytes).collect::<Vec<_>>(), vec![0, 0]);
    assert!(got.is_empty());
}

#[test]
fn more_streams_than_bytes() {
    let data = b"abc".to_vec();
    let (report, got) = round_trip(&data, 8, |net| net);
    assert!(report.is_success());
    assert_eq!(got, data);
}

#[test]
fn single_stream_baseline() {
    let data = payload(300_000, 2);
    let (report, got) = round_trip(&data, 1, |net| net);
    assert_eq!(report.per_connection.len(), 1);
    assert_eq!(report.per_connection[0].bytes, data.len() as u64);
    assert_eq!(got, data);
}

#[test]
fn zero_streams_is_invalid() {
    let net = MemNetwork::new();
    assert!(matches!(send_transfer(b"x", &net, 0), Err(StripeError::InvalidArgument(_))));
}

#[test]
fn reverse_completion_order_still_reassembles() {
    use std::sync::{Arc, Mutex};

    let n = 5;
    let data = payload(200_000, 3);
    let finish_order = Arc::new(Mutex::new(Vec::new()));
    let log = finish_order.clone();
    let chunk = (data.len() / n) as u64;
    // Lower-numbered streams are held back longer, so FINs go out last-to-first.
    let (report, got) = round_trip(&data, n, move |net| {
        Delayed::new(net, move |stream, written| {
            if written > chunk {
                log.lock().unwrap().push(stream);
            }
            if written == 0 {
                Duration::from_millis(40 * (n - 1 - stream) as u64)
            } else {
                Duration::ZERO
            }
        })
    });
    assert!(report.is_success());
    assert_eq!(got, data);
    assert_eq!(*finish_order.lock().unwrap(), vec![4, 3, 2, 1, 0]);
}

#[test]
fn a_slow_stream_only_delays_its_own_chunk() {
    use std::sync::{Arc, Mutex};
    use std::time::Instant;

    let data = payload(400_000, 4);
    let t0 = Instant::now();
    let last_write: Arc<Mutex<[Duration; 4]>> = Arc::default();
    let log = last_write.clone();
    let (_, got) = round_trip(&data, 4, move |net| {
        Delayed::new(net, move |stream, _| {
            log.lock().unwrap()[stream] = t0.elapsed();
            if stream == 2 {
                Duration::from_millis(60)
            } else {
                Duration::ZERO
            }
        })
    });
    assert_eq!(got, data);
    let finished = *last_write.lock().unwrap();
    // HELLO, two DATA frames and FIN: the slow stream needs at least 4 x 60 ms.
    assert!(finished[2] >= Duration::from_millis(180), "{finished:?}");
    for (i, t) in finished.iter().enumerate() {
        if i != 2 {
            assert!(*t + Duration::from_millis(100) < finished[2], "{finished:?}");
        }
    }
}

#[test]
fn loopback_sockets_with_eight_streams() {
    let acceptor = TcpAcceptor::bind("127.0.0.1:0").unwrap();
    let connector = TcpConnector::new(acceptor.local_addr().unwrap()).unwrap();
    let data = payload(2 << 20, 5);
    let mut sink = MemorySink::default();
    let report = thread::scope(|s| {
        let rx = s.spawn(|| serve(&acceptor, &mut sink, &quick_config()));
        let report = send_transfer(&data, &connector, 8).unwrap();
        rx.join().unwrap().unwrap();
        report
    });
    assert!(report.is_success());
    assert_eq!(sink.payloads[&report.transfer_id], data);
}

#[test]
fn unreachable_receiver_fails_to_connect() {
    let acceptor = TcpAcceptor::bind("127.0.0.1:0").unwrap();
    let addr = acceptor.local_addr().unwrap();
    drop(acceptor);
    let connector = TcpConnector::new(addr).unwrap();
    let report = send_transfer(b"hello", &connector, 2).unwrap();
    match report.outcome {
        Outcome::Failure(f) => {
            assert_eq!(f.kind, FailureKind::Connect);
            assert_eq!(f.chunk_index, 0);
        }
        Outcome::Success => panic!("connect to a closed port succeeded"),
    }
}

#[test]
fn two_transfers_share_one_listener() {
    let net = MemNetwork::new();
    let listener = net.listener();
    let a = payload(100_000, 6);
    let b = payload(70_000, 7);
    let mut sink = MemorySink::default();
    let mut done = Vec::new();
    thread::scope(|s| {
        let rx = s.spawn(|| {
            serve_with(&listener, &mut sink, &quick_config(), |event| {
                match event {
                    ServeEvent::Completed(t) => done.push(t.transfer_id),
                    other => panic!("unexpected {other:?}"),
                }
                if done.len() == 2 {
                    ControlFlow::Break(())
                } else {
                    ControlFlow::Continue(())
                }
            })
        });
        let ta = s.spawn(|| send_transfer(&a, &net, 3).unwrap());
        let tb = s.spawn(|| send_transfer(&b, &net, 2).unwrap());
        assert!(ta.join().unwrap().is_success());
        assert!(tb.join().unwrap().is_success());
        rx.join().unwrap().unwrap();
    });
    assert_eq!(done.len(), 2);
    let mut stored: Vec<usize> = sink.payloads.values().map(Vec::len).collect();
    stored.sort_unstable();
    assert_eq!(stored, vec![70_000, 100_000]);
}

// ── Hand-crafted misbehaving connections ──────────────────────────────────

fn write_frames<S: Stream>(stream: &mut S, frames: &[Frame]) {
    for f in frames {
        stream.write_all(&encode_frame(f).unwrap()).unwrap();
    }
}

fn serve_in_background<F>(config: ReceiverConfig, drive: F) -> Result<ptcp::striping::ReceivedTransfer, StripeError>
where
    F: FnOnce(&MemNetwork) + Send,
{
    let net = MemNetwork::new();
    let listener = net.listener();
    let mut sink = MemorySink::default();
    thread::scope(|s| {
        let rx = s.spawn(|| serve(&listener, &mut sink, &config));
        drive(&net);
        rx.join().unwrap()
    })
}

#[test]
fn data_before_hello_is_a_protocol_error() {
    let result = serve_in_background(quick_config(), |net| {
        let mut stream = net.connect().unwrap();
        write_frames(&mut stream, &[Frame::Data(Data { chunk_index: 0, offset_in_chunk: 0, payload: b"x".to_vec() })]);
        thread::sleep(Duration::from_millis(50));
    });
    assert!(matches!(result, Err(StripeError::Protocol(msg)) if msg.contains("before HELLO")));
}

#[test]
fn duplicate_chunk_index_is_a_protocol_error() {
    let data = payload(4000, 8);
    let manifest = TransferManifest::new(TransferId([9; 16]), &data, 4).unwrap();
    let result = serve_in_background(quick_config(), |net| {
        let mut first = net.connect().unwrap();
        let mut second = net.connect().unwrap();
        write_frames(&mut first, &[Frame::Hello(manifest.hello(3))]);
        thread::sleep(Duration::from_millis(20));
        write_frames(&mut second, &[Frame::Hello(manifest.hello(3))]);
        thread::sleep(Duration::from_millis(50));
    });
    assert!(matches!(result, Err(StripeError::Protocol(msg)) if msg.contains("registered twice")));
}

#[test]
fn inconsistent_hello_is_a_protocol_error() {
    let data = payload(4000, 9);
    let manifest = TransferManifest::new(TransferId([1; 16]), &data, 2).unwrap();
    let mut other = manifest.hello(1);
    other.payload_digest = Digest([0; 32]);
    let result = serve_in_background(quick_config(), |net| {
        let mut a = net.connect().unwrap();
        let mut b = net.connect().unwrap();
        write_frames(&mut a, &[Frame::Hello(manifest.hello(0))]);
        thread::sleep(Duration::from_millis(20));
        write_frames(&mut b, &[Frame::Hello(other)]);
        thread::sleep(Duration::from_millis(50));
    });
    assert!(matches!(result, Err(StripeError::Protocol(msg)) if msg.contains("disagrees")));
}

#[test]
fn hello_with_wrong_assignment_is_rejected() {
    let data = payload(4000, 10);
    let manifest = TransferManifest::new(TransferId([2; 16]), &data, 2).unwrap();
    let mut hello = manifest.hello(1);
    hello.chunk_offset += 1;
    let result = serve_in_background(quick_config(), |net| {
        let mut a = net.connect().unwrap();
        write_frames(&mut a, &[Frame::Hello(hello)]);
        thread::sleep(Duration::from_millis(50));
    });
    assert!(matches!(result, Err(StripeError::Protocol(_))));
}

#[test]
fn corrupt_chunk_fails_the_transfer() {
    let data = payload(1000, 11);
    let manifest = TransferManifest::new(TransferId([3; 16]), &data, 1).unwrap();
    let result = serve_in_background(quick_config(), |net| {
        let mut a = net.connect().unwrap();
        let mut tampered = data.clone();
        tampered[10] ^= 1;
        write_frames(
            &mut a,
            &[
                Frame::Hello(manifest.hello(0)),
                Frame::Data(Data { chunk_index: 0, offset_in_chunk: 0, payload: tampered }),
                Frame::Fin(Fin { chunk_index: 0, chunk_digest: Digest::of(&data) }),
            ],
        );
        // The receiver closes without echoing the FIN.
        let mut buf = [0u8; 64];
        assert_eq!(a.read_some(&mut buf).unwrap(), 0);
    });
    assert!(matches!(result, Err(StripeError::CorruptChunk { index: 0, .. })));
}

#[test]
fn silent_connection_stalls() {
    let data = payload(1000, 12);
    let manifest = TransferManifest::new(TransferId([4; 16]), &data, 1).unwrap();
    let config = ReceiverConfig {
        idle_timeout: Duration::from_millis(100),
        poll_interval: Duration::from_millis(5),
        ..ReceiverConfig::default()
    };
    let result = serve_in_background(config, |net| {
        let mut a = net.connect().unwrap();
        write_frames(&mut a, &[Frame::Hello(manifest.hello(0))]);
        thread::sleep(Duration::from_millis(400));
    });
    assert!(matches!(result, Err(StripeError::Stalled { transfer_id: Some(id) }) if id == TransferId([4; 16])));
}

#[test]
fn oversized_transfer_is_refused() {
    let data = payload(10_000, 13);
    let manifest = TransferManifest::new(TransferId([5; 16]), &data, 2).unwrap();
    let config = ReceiverConfig { memory_cap: 5_000, ..quick_config() };
    let result = serve_in_background(config, |net| {
        let mut a = net.connect().unwrap();
        write_frames(&mut a, &[Frame::Hello(manifest.hello(0))]);
        thread::sleep(Duration::from_millis(50));
    });
    assert!(matches!(result, Err(StripeError::TooLarge { total_size: 10_000, .. })));
}

#[test]
fn sender_reports_rejection_when_receiver_refuses() {
    let net = MemNetwork::new();
    let listener = net.listener();
    let data = payload(50_000, 14);
    let config = ReceiverConfig { memory_cap: 1_000, ..quick_config() };
    let mut sink = MemorySink::default();
    let options = SendOptions { idle_timeout: Duration::from_secs(5), transfer_id: None };
    let report = thread::scope(|s| {
        let rx = s.spawn(|| serve(&listener, &mut sink, &config));
        let report = send_transfer_with(&data, &net, 2, &options).unwrap();
        assert!(rx.join().unwrap().is_err());
        report
    });
    assert!(matches!(report.outcome, Outcome::Failure(f) if f.kind == FailureKind::Rejected));
}
