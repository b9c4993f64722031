use std::time::Duration;

use crate::transport::{Connector, Stream};
use crate::wire::{
    encode_data_into, encode_into, Digest, Fin, Frame, FrameDecoder, TransferId, TransferManifest, MAX_DATA_PAYLOAD,
};

use super::StripeError;

#[derive(Debug, Clone)]
pub struct SendOptions {
    /// How long a worker waits for the receiver's acknowledgement.
    pub idle_timeout: Duration,
    /// Fixed transfer id; a random one is drawn when unset.
    pub transfer_id: Option<TransferId>,
}

impl Default for SendOptions {
    fn default() -> Self {
        SendOptions { idle_timeout: Duration::from_secs(30), transfer_id: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConnectionReport {
    pub chunk_index: u32,
    pub bytes: u64,
    pub start: Duration,
    pub end: Duration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    /// The stream could not be opened.
    Connect,
    /// The stream broke while the chunk was in flight.
    Stream,
    /// The receiver closed without acknowledging the chunk.
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferFailure {
    pub chunk_index: u32,
    pub kind: FailureKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Success,
    Failure(TransferFailure),
}

#[derive(Debug, Clone)]
pub struct TransferReport {
    pub transfer_id: TransferId,
    pub total_size: u64,
    /// Bytes of chunks the receiver acknowledged.
    pub bytes_sent: u64,
    pub wall_time: Duration,
    /// One row per chunk that finished, in chunk order.
    pub per_connection: Vec<ConnectionReport>,
    pub outcome: Outcome,
}

impl TransferReport {
    pub fn is_success(&self) -> bool {
        self.outcome == Outcome::Success
    }

    /// Aggregate goodput in bytes per second.
    pub fn throughput(&self) -> f64 {
        let secs = self.wall_time.as_secs_f64();
        if secs > 0.0 {
            self.bytes_sent as f64 / secs
        } else {
            0.0
        }
    }
}

pub fn send_transfer<C: Connector>(payload: &[u8], connector: &C, n: usize) -> Result<TransferReport, StripeError> {
    send_transfer_with(payload, connector, n, &SendOptions::default())
}

/// Sends `payload` as one transfer striped over `n` streams.
///
/// All streams are opened first, then one worker per stream runs
/// concurrently. Failures are reported in [`TransferReport::outcome`];
/// only a bad argument is an `Err`.
pub fn send_transfer_with<C: Connector>(
    payload: &[u8],
    connector: &C,
    n: usize,
    options: &SendOptions,
) -> Result<TransferReport, StripeError> {
    let count = u32::try_from(n)
        .ok()
        .filter(|&c| c >= 1)
        .ok_or_else(|| StripeError::InvalidArgument(format!("stream count {n} must be in 1..=u32::MAX")))?;
    let transfer_id = options.transfer_id.unwrap_or_else(TransferId::random);
    let manifest = TransferManifest::new(transfer_id, payload, count)?;
    let started = connector.now();

    let mut streams = Vec::with_capacity(n);
    for index in 0..count {
        match connector.connect() {
            Ok(stream) => streams.push(stream),
            Err(e) => {
                return Ok(TransferReport {
                    transfer_id,
                    total_size: manifest.total_size,
                    bytes_sent: 0,
                    wall_time: connector.now().saturating_sub(started),
                    per_connection: Vec::new(),
                    outcome: Outcome::Failure(TransferFailure {
                        chunk_index: index,
                        kind: FailureKind::Connect,
                        message: e.to_string(),
                    }),
                });
            }
        }
    }

    let results: Vec<Result<ConnectionReport, TransferFailure>> = std::thread::scope(|scope| {
        let workers: Vec<_> = streams
            .into_iter()
            .enumerate()
            .map(|(index, mut stream)| {
                let manifest = &manifest;
                scope.spawn(move || {
                    let index = index as u32;
                    let start = connector.now();
                    send_chunk(&mut stream, manifest, payload, index, options.idle_timeout)
                        .map(|()| ConnectionReport {
                            chunk_index: index,
                            bytes: manifest.chunks[index as usize].length,
                            start,
                            end: connector.now(),
                        })
                        .map_err(|(kind, message)| TransferFailure { chunk_index: index, kind, message })
                })
            })
            .collect();
        workers.into_iter().map(|w| w.join().expect("sender worker panicked")).collect()
    });

    let wall_time = connector.now().saturating_sub(started);
    let mut per_connection = Vec::with_capacity(n);
    let mut failure = None;
    for result in results {
        match result {
            Ok(row) => per_connection.push(row),
            Err(f) => {
                failure.get_or_insert(f);
            }
        }
    }
    Ok(TransferReport {
        transfer_id,
        total_size: manifest.total_size,
        bytes_sent: per_connection.iter().map(|r| r.bytes).sum(),
        wall_time,
        per_connection,
        outcome: failure.map_or(Outcome::Success, Outcome::Failure),
    })
}

type WorkerError = (FailureKind, String);

fn stream_err(e: impl ToString) -> WorkerError {
    (FailureKind::Stream, e.to_string())
}

fn send_chunk<S: Stream>(
    stream: &mut S,
    manifest: &TransferManifest,
    payload: &[u8],
    index: u32,
    idle_timeout: Duration,
) -> Result<(), WorkerError> {
    let chunk = &payload[manifest.chunks[index as usize].range()];
    let mut buf = Vec::with_capacity(MAX_DATA_PAYLOAD + 64);

    encode_into(&Frame::Hello(manifest.hello(index)), &mut buf).map_err(stream_err)?;
    stream.write_all(&buf).map_err(stream_err)?;

    let mut offset = 0u64;
    for piece in chunk.chunks(MAX_DATA_PAYLOAD) {
        buf.clear();
        encode_data_into(index, offset, piece, &mut buf).map_err(stream_err)?;
        stream.write_all(&buf).map_err(stream_err)?;
        offset += piece.len() as u64;
    }

    let fin = Fin { chunk_index: index, chunk_digest: Digest::of(chunk) };
    buf.clear();
    encode_into(&Frame::Fin(fin.clone()), &mut buf).map_err(stream_err)?;
    stream.write_all(&buf).map_err(stream_err)?;

    // The receiver echoes our FIN once the whole payload is verified and stored.
    stream.set_read_timeout(Some(idle_timeout)).map_err(stream_err)?;
    let mut decoder = FrameDecoder::new();
    let mut scratch = [0u8; 256];
    let echo = loop {
        if let Some(frame) = decoder.next_frame().map_err(stream_err)? {
            break frame;
        }
        match stream.read_some(&mut scratch) {
            Ok(0) => {
                return Err((FailureKind::Rejected, format!("receiver closed without acknowledging chunk {index}")))
            }
            Ok(k) => decoder.push(&scratch[..k]),
            Err(e) => return Err(stream_err(e)),
        }
    };
    if echo != Frame::Fin(fin) {
        return Err((FailureKind::Rejected, format!("unexpected acknowledgement for chunk {index}: {echo:?}")));
    }
    let _ = stream.close();
    Ok(())
}
