//! Binary framing shared by the sending and receiving sides of a striped
//! transfer, plus the rule that splits a payload into per-connection chunks.
//!
//! Every frame starts with the 4-byte magic `PTCP`, a version byte and a kind
//! byte, followed by a fixed layout per kind. All integers are big-endian.
//!
//! ```text
//! HELLO  transfer_id[16] total_size u64 connection_count u32 chunk_index u32
//!        chunk_offset u64 chunk_length u64 payload_digest[32]
//! DATA   chunk_index u32 offset_in_chunk u64 payload_len u32 payload[payload_len]
//! FIN    chunk_index u32 chunk_digest[32]
//! ```

use std::fmt;

use rand::RngCore;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"PTCP";
pub const VERSION: u8 = 1;
/// Largest payload a single DATA frame may carry.
pub const MAX_DATA_PAYLOAD: usize = 64 * 1024;

const KIND_HELLO: u8 = 0x01;
const KIND_DATA: u8 = 0x02;
const KIND_FIN: u8 = 0x03;

const PREFIX_LEN: usize = 6;
const HELLO_BODY_LEN: usize = 16 + 8 + 4 + 4 + 8 + 8 + 32;
const DATA_HEADER_LEN: usize = 4 + 8 + 4;
const FIN_BODY_LEN: usize = 4 + 32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("protocol error at byte {offset}: {reason}")]
    Protocol { offset: u64, reason: String },
}

/// Random 128-bit identifier naming one striped transfer.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TransferId(pub [u8; 16]);

impl TransferId {
    pub fn random() -> Self {
        let mut bytes = [0u8; 16];
        rand::thread_rng().fill_bytes(&mut bytes);
        TransferId(bytes)
    }
}

impl fmt::Display for TransferId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_hex(f, &self.0)
    }
}

impl fmt::Debug for TransferId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TransferId({self})")
    }
}

/// SHA-256 digest of a chunk or of a whole payload.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn of(bytes: &[u8]) -> Self {
        Digest(Sha256::digest(bytes).into())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_hex(f, &self.0)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({self})")
    }
}

fn write_hex(f: &mut fmt::Formatter<'_>, bytes: &[u8]) -> fmt::Result {
    for b in bytes {
        write!(f, "{b:02x}")?;
    }
    Ok(())
}

/// One connection's share of a payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkAssignment {
    pub index: u32,
    pub offset: u64,
    pub length: u64,
}

impl ChunkAssignment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset as usize..(self.offset + self.length) as usize
    }
}

/// Splits `total_size` bytes into `n` contiguous chunks. The first
/// `total_size % n` chunks carry one extra byte.
pub fn partition(total_size: u64, n: u32) -> Result<Vec<ChunkAssignment>, WireError> {
    if n == 0 {
        return Err(WireError::InvalidArgument("connection count must be at least 1".into()));
    }
    Ok((0..n).map(|index| chunk_of(total_size, n, index)).collect())
}

/// The assignment `partition(total_size, n)` would give chunk `index`,
/// computed without materialising the whole table.
pub fn chunk_of(total_size: u64, n: u32, index: u32) -> ChunkAssignment {
    debug_assert!(index < n);
    let base = total_size / n as u64;
    let extra = total_size % n as u64;
    let i = index as u64;
    ChunkAssignment { index, offset: i * base + i.min(extra), length: base + u64::from(i < extra) }
}

/// The chunk table binding byte ranges to connection sequence numbers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferManifest {
    pub transfer_id: TransferId,
    pub total_size: u64,
    pub connection_count: u32,
    pub chunks: Vec<ChunkAssignment>,
    pub payload_digest: Digest,
}

impl TransferManifest {
    pub fn new(transfer_id: TransferId, payload: &[u8], n: u32) -> Result<Self, WireError> {
        let total_size = payload.len() as u64;
        Ok(TransferManifest {
            transfer_id,
            total_size,
            connection_count: n,
            chunks: partition(total_size, n)?,
            payload_digest: Digest::of(payload),
        })
    }

    pub fn hello(&self, index: u32) -> Hello {
        let chunk = self.chunks[index as usize];
        Hello {
            transfer_id: self.transfer_id,
            total_size: self.total_size,
            connection_count: self.connection_count,
            chunk_index: index,
            chunk_offset: chunk.offset,
            chunk_length: chunk.length,
            payload_digest: self.payload_digest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hello {
    pub transfer_id: TransferId,
    pub total_size: u64,
    pub connection_count: u32,
    pub chunk_index: u32,
    pub chunk_offset: u64,
    pub chunk_length: u64,
    pub payload_digest: Digest,
}

impl Hello {
    /// Fields shared by every connection of one transfer.
    pub fn same_transfer_as(&self, other: &Hello) -> bool {
        self.transfer_id == other.transfer_id
            && self.total_size == other.total_size
            && self.connection_count == other.connection_count
            && self.payload_digest == other.payload_digest
    }

    pub fn assignment(&self) -> ChunkAssignment {
        ChunkAssignment { index: self.chunk_index, offset: self.chunk_offset, length: self.chunk_length }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Data {
    pub chunk_index: u32,
    pub offset_in_chunk: u64,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fin {
    pub chunk_index: u32,
    pub chunk_digest: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Hello(Hello),
    Data(Data),
    Fin(Fin),
}

impl Frame {
    pub fn encoded_len(&self) -> usize {
        PREFIX_LEN
            + match self {
                Frame::Hello(_) => HELLO_BODY_LEN,
                Frame::Data(d) => DATA_HEADER_LEN + d.payload.len(),
                Frame::Fin(_) => FIN_BODY_LEN,
            }
    }
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::with_capacity(frame.encoded_len());
    encode_into(frame, &mut out)?;
    Ok(out)
}

/// Appends the encoding of `frame` to `out`. On error nothing is written.
pub fn encode_into(frame: &Frame, out: &mut Vec<u8>) -> Result<(), WireError> {
    let kind = match frame {
        Frame::Data(d) => return encode_data_into(d.chunk_index, d.offset_in_chunk, &d.payload, out),
        Frame::Hello(_) => KIND_HELLO,
        Frame::Fin(_) => KIND_FIN,
    };
    out.reserve(frame.encoded_len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(kind);
    match frame {
        Frame::Hello(h) => {
            out.extend_from_slice(&h.transfer_id.0);
            out.extend_from_slice(&h.total_size.to_be_bytes());
            out.extend_from_slice(&h.connection_count.to_be_bytes());
            out.extend_from_slice(&h.chunk_index.to_be_bytes());
            out.extend_from_slice(&h.chunk_offset.to_be_bytes());
            out.extend_from_slice(&h.chunk_length.to_be_bytes());
            out.extend_from_slice(&h.payload_digest.0);
        }
        Frame::Fin(f) => {
            out.extend_from_slice(&f.chunk_index.to_be_bytes());
            out.extend_from_slice(&f.chunk_digest.0);
        }
        Frame::Data(_) => unreachable!(),
    }
    Ok(())
}

/// Appends a DATA frame built from a borrowed payload slice.
pub fn encode_data_into(
    chunk_index: u32,
    offset_in_chunk: u64,
    payload: &[u8],
    out: &mut Vec<u8>,
) -> Result<(), WireError> {
    if payload.is_empty() || payload.len() > MAX_DATA_PAYLOAD {
        return Err(WireError::InvalidArgument(format!(
            "DATA payload of {} bytes outside 1..={MAX_DATA_PAYLOAD}",
            payload.len()
        )));
    }
    out.reserve(PREFIX_LEN + DATA_HEADER_LEN + payload.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(KIND_DATA);
    out.extend_from_slice(&chunk_index.to_be_bytes());
    out.extend_from_slice(&offset_in_chunk.to_be_bytes());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    Ok(())
}

/// Decodes every complete frame in `buffer`, returning them with the
/// unconsumed tail.
pub fn decode_frames(buffer: &[u8]) -> Result<(Vec<Frame>, &[u8]), WireError> {
    let mut frames = Vec::new();
    let mut pos = 0;
    while let Some((frame, used)) = decode_one(&buffer[pos..], pos as u64)? {
        frames.push(frame);
        pos += used;
    }
    Ok((frames, &buffer[pos..]))
}

/// Incremental decoder for a byte stream that arrives in arbitrary pieces.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    start: usize,
    /// Stream offset of `buf[0]`.
    base: u64,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        if self.start > 0 && self.start >= self.buf.len() / 2 {
            self.buf.drain(..self.start);
            self.base += self.start as u64;
            self.start = 0;
        }
        self.buf.extend_from_slice(bytes);
    }

    pub fn next_frame(&mut self) -> Result<Option<Frame>, WireError> {
        let offset = self.base + self.start as u64;
        match decode_one(&self.buf[self.start..], offset)? {
            Some((frame, used)) => {
                self.start += used;
                Ok(Some(frame))
            }
            None => Ok(None),
        }
    }

    /// Bytes received but not yet part of a complete frame.
    pub fn pending(&self) -> &[u8] {
        &self.buf[self.start..]
    }
}

fn protocol(offset: u64, reason: impl Into<String>) -> WireError {
    WireError::Protocol { offset, reason: reason.into() }
}

fn decode_one(buf: &[u8], offset: u64) -> Result<Option<(Frame, usize)>, WireError> {
    let magic_seen = buf.len().min(MAGIC.len());
    if buf[..magic_seen] != MAGIC[..magic_seen] {
        return Err(protocol(offset, "bad magic"));
    }
    if buf.len() < PREFIX_LEN {
        return Ok(None);
    }
    if buf[4] != VERSION {
        return Err(protocol(offset + 4, format!("unsupported version {}", buf[4])));
    }
    let kind = buf[5];
    let body = &buf[PREFIX_LEN..];
    let frame_len = match kind {
        KIND_HELLO => PREFIX_LEN + HELLO_BODY_LEN,
        KIND_FIN => PREFIX_LEN + FIN_BODY_LEN,
        KIND_DATA => {
            if body.len() < DATA_HEADER_LEN {
                return Ok(None);
            }
            let len = u32::from_be_bytes(body[12..16].try_into().unwrap()) as usize;
            if len == 0 || len > MAX_DATA_PAYLOAD {
                return Err(protocol(
                    offset + (PREFIX_LEN + 12) as u64,
                    format!("DATA payload length {len} out of range"),
                ));
            }
            PREFIX_LEN + DATA_HEADER_LEN + len
        }
        other => return Err(protocol(offset + 5, format!("unknown frame kind {other:#04x}"))),
    };
    if buf.len() < frame_len {
        return Ok(None);
    }
    let mut r = Reader(&buf[PREFIX_LEN..frame_len]);
    let frame = match kind {
        KIND_HELLO => Frame::Hello(Hello {
            transfer_id: TransferId(r.array()),
            total_size: r.u64(),
            connection_count: r.u32(),
            chunk_index: r.u32(),
            chunk_offset: r.u64(),
            chunk_length: r.u64(),
            payload_digest: Digest(r.array()),
        }),
        KIND_DATA => {
            let chunk_index = r.u32();
            let offset_in_chunk = r.u64();
            let _len = r.u32();
            Frame::Data(Data { chunk_index, offset_in_chunk, payload: r.0.to_vec() })
        }
        _ => Frame::Fin(Fin { chunk_index: r.u32(), chunk_digest: Digest(r.array()) }),
    };
    Ok(Some((frame, frame_len)))
}

/// Cursor over a slice whose length has already been checked.
struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn array<const N: usize>(&mut self) -> [u8; N] {
        let (head, rest) = self.0.split_at(N);
        self.0 = rest;
        head.try_into().unwrap()
    }

    fn u32(&mut self) -> u32 {
        u32::from_be_bytes(self.array())
    }

    fn u64(&mut self) -> u64 {
        u64::from_be_bytes(self.array())
    }
}
