//! Byte accounting over a transcript.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::model::layer_index_of;

use super::message::{Direction, MessageKind, Phase, ProtocolMessage, ENVELOPE_LEN};
use super::Result;

/// Payload bytes per phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseBytes {
    pub session: u64,
    pub transfer: u64,
    pub train: u64,
    pub inference: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommReport {
    /// Sum of payload lengths over every message.
    pub total_bytes: u64,
    /// `total_bytes` plus the fixed envelope of every message.
    pub framed_bytes: u64,
    /// Transfer plus training traffic.
    pub fine_tune_bytes: u64,
    pub by_phase: PhaseBytes,
    pub client_to_server: u64,
    pub server_to_client: u64,
    pub by_kind: BTreeMap<String, u64>,
    pub message_counts: BTreeMap<String, u64>,
    /// Distinct pre-trained layers sent to the client.
    pub shared_layer_count: usize,
}

pub fn account(transcript: &[ProtocolMessage]) -> Result<CommReport> {
    let mut r = CommReport::default();
    let mut shared = BTreeSet::new();
    for m in transcript {
        let n = m.payload_byte_len();
        r.total_bytes += n;
        r.framed_bytes += n + ENVELOPE_LEN as u64;
        match m.direction()? {
            Direction::ClientToServer => r.client_to_server += n,
            Direction::ServerToClient => r.server_to_client += n,
        }
        match m.phase()? {
            Phase::Session => r.by_phase.session += n,
            Phase::Transfer => r.by_phase.transfer += n,
            Phase::Train => r.by_phase.train += n,
            Phase::Inference => r.by_phase.inference += n,
        }
        *r.by_kind.entry(m.kind.name().to_string()).or_default() += n;
        *r.message_counts.entry(m.kind.name().to_string()).or_default() += 1;
        if m.kind == MessageKind::ModelTransfer {
            let ck = Checkpoint::from_bytes(&m.payload)?;
            shared.extend(ck.names().filter_map(layer_index_of));
        }
    }
    r.fine_tune_bytes = r.by_phase.transfer + r.by_phase.train;
    r.shared_layer_count = shared.len();
    Ok(r)
}
