//! Application-layer striping of one payload over `n` concurrent streams.
//!
//! The sender cuts the payload into `n` contiguous chunks and runs one worker
//! per stream: HELLO, the chunk as DATA frames in order, then FIN with the
//! chunk digest. The receiver runs one worker per accepted stream and a
//! monitor that tracks which chunks of each transfer have registered and
//! completed. Once the last chunk's FIN verifies, the monitor gathers the
//! chunks in index order, checks the payload digest and hands the payload to
//! a [`PayloadSink`]. Each sender worker then gets its FIN echoed back as the
//! end-to-end acknowledgement.
//!
//! Streams never coordinate with each other. A slow or stalled stream only
//! delays its own chunk.

mod receiver;
mod sender;

use std::collections::BTreeMap;
use std::io;

use thiserror::Error;

use crate::wire::{ChunkAssignment, TransferId, WireError};

pub use receiver::{serve, serve_with, DirSink, MemorySink, PayloadSink, ReceivedTransfer, ReceiverConfig, ServeEvent};
pub use sender::{
    send_transfer, send_transfer_with, ConnectionReport, FailureKind, Outcome, SendOptions, TransferFailure,
    TransferReport,
};

#[derive(Debug, Error)]
pub enum StripeError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("transfer {transfer_id}: chunk {index} failed digest verification")]
    CorruptChunk { transfer_id: TransferId, index: u32 },
    #[error("transfer {transfer_id}: payload failed digest verification")]
    CorruptPayload { transfer_id: TransferId },
    #[error("transfer {}: stalled", .transfer_id.map(|t| t.to_string()).unwrap_or_else(|| "<unregistered>".into()))]
    Stalled { transfer_id: Option<TransferId> },
    #[error("transfer {transfer_id}: {total_size} bytes exceeds the receive buffer cap of {cap}")]
    TooLarge { transfer_id: TransferId, total_size: u64, cap: u64 },
    #[error("assembly error: {0}")]
    Assembly(String),
    #[error("connection closed before chunk {index} finished")]
    Truncated { index: u32 },
    #[error("could not store payload: {0}")]
    Sink(io::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Gathers chunks in ascending index order into the final payload.
pub fn assemble(
    chunks: &BTreeMap<u32, Vec<u8>>,
    layout: &[ChunkAssignment],
    total_size: u64,
) -> Result<Vec<u8>, StripeError> {
    let mut payload = Vec::with_capacity(total_size as usize);
    for assignment in layout {
        let chunk = chunks
            .get(&assignment.index)
            .ok_or_else(|| StripeError::Assembly(format!("missing chunk {}", assignment.index)))?;
        if chunk.len() as u64 != assignment.length {
            return Err(StripeError::Assembly(format!(
                "chunk {} has {} bytes, expected {}",
                assignment.index,
                chunk.len(),
                assignment.length
            )));
        }
        payload.extend_from_slice(chunk);
    }
    if chunks.len() != layout.len() {
        return Err(StripeError::Assembly(format!(
            "{} chunks supplied for a {}-chunk layout",
            chunks.len(),
            layout.len()
        )));
    }
    if payload.len() as u64 != total_size {
        return Err(StripeError::Assembly(format!("assembled {} bytes, expected {total_size}", payload.len())));
    }
    Ok(payload)
}
