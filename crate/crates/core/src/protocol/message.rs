//! Message envelope, tensor ids and transcript files.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ProtocolError, Result};

pub const MESSAGE_MAGIC: &[u8; 4] = b"GTMS";
pub const MESSAGE_VERSION: u8 = 1;
/// Bytes of envelope preceding the payload.
pub const ENVELOPE_LEN: usize = 4 + 1 + 8 + 8 + 1 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    ActivationFrame = 1,
    GradientFrame = 2,
    ModelTransfer = 3,
    LossReport = 4,
    Control = 5,
}

impl MessageKind {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => Self::ActivationFrame,
            2 => Self::GradientFrame,
            3 => Self::ModelTransfer,
            4 => Self::LossReport,
            5 => Self::Control,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::ActivationFrame => "activation",
            Self::GradientFrame => "gradient",
            Self::ModelTransfer => "model_transfer",
            Self::LossReport => "loss_report",
            Self::Control => "control",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ClientToServer,
    ServerToClient,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Session open/close control traffic.
    Session,
    Transfer,
    Train,
    Inference,
}

/// Which cut-point tensor a frame carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Slot {
    /// Input-adapter output, client to server.
    Cut1Activation = 1,
    /// Backbone output, server to client.
    Cut2Activation = 2,
    /// Loss gradient at the backbone output, client to server.
    Cut2Gradient = 3,
    /// Gradient at the input-adapter output, server to client.
    Cut1Gradient = 4,
}

impl Slot {
    pub fn direction(self) -> Direction {
        match self {
            Slot::Cut1Activation | Slot::Cut2Gradient => Direction::ClientToServer,
            Slot::Cut2Activation | Slot::Cut1Gradient => Direction::ServerToClient,
        }
    }

    pub fn kind(self) -> MessageKind {
        match self {
            Slot::Cut1Activation | Slot::Cut2Activation => MessageKind::ActivationFrame,
            Slot::Cut2Gradient | Slot::Cut1Gradient => MessageKind::GradientFrame,
        }
    }
}

/// Tensor id layout: bit 31 marks inference, bits 4..31 hold the training
/// step or inference batch index, bits 0..4 hold the [`Slot`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorTag {
    pub inference: bool,
    pub index: u32,
    pub slot: Slot,
}

const INFERENCE_BIT: u32 = 1 << 31;
pub const MAX_TAG_INDEX: u32 = (1 << 27) - 1;

impl TensorTag {
    pub fn train(step: u32, slot: Slot) -> Self {
        Self {
            inference: false,
            index: step,
            slot,
        }
    }

    pub fn inference(index: u32, slot: Slot) -> Self {
        Self {
            inference: true,
            index,
            slot,
        }
    }

    pub fn encode(self) -> Result<u32> {
        if self.index > MAX_TAG_INDEX {
            return Err(ProtocolError::Contract(format!(
                "index {} too large for a tensor id",
                self.index
            )));
        }
        Ok(if self.inference { INFERENCE_BIT } else { 0 } | (self.index << 4) | self.slot as u32)
    }

    pub fn decode(id: u32) -> Result<Self> {
        let slot = match id & 0xf {
            1 => Slot::Cut1Activation,
            2 => Slot::Cut2Activation,
            3 => Slot::Cut2Gradient,
            4 => Slot::Cut1Gradient,
            s => {
                return Err(ProtocolError::Unexpected(format!(
                    "tensor id {id:#x} has unknown slot {s}"
                )))
            }
        };
        Ok(Self {
            inference: id & INFERENCE_BIT != 0,
            index: (id & !INFERENCE_BIT) >> 4,
            slot,
        })
    }

    pub fn phase(self) -> Phase {
        if self.inference {
            Phase::Inference
        } else {
            Phase::Train
        }
    }
}

pub mod control {
    pub const OPEN: u8 = 1;
    pub const CLOSE: u8 = 2;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProtocolMessage {
    pub session_id: u64,
    pub sequence: u64,
    pub kind: MessageKind,
    pub payload: Vec<u8>,
}

impl ProtocolMessage {
    pub fn payload_byte_len(&self) -> u64 {
        self.payload.len() as u64
    }

    /// Tag of the carried tensor, for activation and gradient frames.
    pub fn tag(&self) -> Result<Option<TensorTag>> {
        match self.kind {
            MessageKind::ActivationFrame | MessageKind::GradientFrame => {
                let id = self
                    .payload
                    .get(5..9)
                    .ok_or_else(|| ProtocolError::Unexpected("tensor frame too short".into()))?;
                let tag = TensorTag::decode(u32::from_le_bytes(id.try_into().expect("four bytes")))?;
                if tag.slot.kind() != self.kind {
                    return Err(ProtocolError::Unexpected(format!(
                        "{:?} slot inside a {:?} message",
                        tag.slot, self.kind
                    )));
                }
                Ok(Some(tag))
            }
            _ => Ok(None),
        }
    }

    pub fn direction(&self) -> Result<Direction> {
        Ok(match self.kind {
            MessageKind::ModelTransfer => Direction::ServerToClient,
            MessageKind::LossReport | MessageKind::Control => Direction::ClientToServer,
            _ => self.tag()?.expect("tensor frame").slot.direction(),
        })
    }

    pub fn phase(&self) -> Result<Phase> {
        Ok(match self.kind {
            MessageKind::ModelTransfer => Phase::Transfer,
            MessageKind::LossReport => Phase::Train,
            MessageKind::Control => Phase::Session,
            _ => self.tag()?.expect("tensor frame").phase(),
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(ENVELOPE_LEN + self.payload.len());
        self.write_to(&mut out);
        out
    }

    fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MESSAGE_MAGIC);
        out.push(MESSAGE_VERSION);
        out.extend_from_slice(&self.session_id.to_le_bytes());
        out.extend_from_slice(&self.sequence.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.payload_byte_len().to_le_bytes());
        out.extend_from_slice(&self.payload);
    }

    /// Decodes one message from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn decode_prefix(bytes: &[u8], base_offset: usize) -> Result<(Self, usize)> {
        let fail = |at: usize, reason: &str| ProtocolError::Decode {
            offset: base_offset + at,
            reason: reason.to_string(),
        };
        if bytes.len() < ENVELOPE_LEN {
            return Err(fail(bytes.len(), "truncated envelope"));
        }
        if &bytes[..4] != MESSAGE_MAGIC {
            return Err(fail(0, "bad magic"));
        }
        if bytes[4] != MESSAGE_VERSION {
            return Err(fail(4, "unsupported version"));
        }
        let u64_at = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().expect("eight bytes"));
        let session_id = u64_at(5);
        let sequence = u64_at(13);
        let kind = MessageKind::from_u8(bytes[21]).ok_or_else(|| fail(21, "unknown message kind"))?;
        let len = u64_at(22);
        let end = usize::try_from(len)
            .ok()
            .and_then(|l| ENVELOPE_LEN.checked_add(l))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fail(22, "payload length exceeds available bytes"))?;
        Ok((
            Self {
                session_id,
                sequence,
                kind,
                payload: bytes[ENVELOPE_LEN..end].to_vec(),
            },
            end,
        ))
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (m, used) = Self::decode_prefix(bytes, 0)?;
        if used != bytes.len() {
            return Err(ProtocolError::Decode {
                offset: used,
                reason: "trailing bytes after message".into(),
            });
        }
        Ok(m)
    }
}

/// Concatenated framed messages.
pub fn encode_transcript(messages: &[ProtocolMessage]) -> Vec<u8> {
    let mut out = Vec::new();
    for m in messages {
        m.write_to(&mut out);
    }
    out
}

pub fn decode_transcript(bytes: &[u8]) -> Result<Vec<ProtocolMessage>> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let (m, used) = ProtocolMessage::decode_prefix(&bytes[pos..], pos)?;
        out.push(m);
        pos += used;
    }
    Ok(out)
}

pub fn save_transcript(messages: &[ProtocolMessage], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_transcript(messages))?;
    Ok(())
}

pub fn load_transcript(path: impl AsRef<Path>) -> Result<Vec<ProtocolMessage>> {
    decode_transcript(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tag_round_trip() {
        for tag in [
            TensorTag::train(0, Slot::Cut1Activation),
            TensorTag::train(12345, Slot::Cut1Gradient),
            TensorTag::inference(MAX_TAG_INDEX, Slot::Cut2Activation),
        ] {
            assert_eq!(TensorTag::decode(tag.encode().unwrap()).unwrap(), tag);
        }
        assert_eq!(TensorTag::train(2, Slot::Cut2Gradient).encode().unwrap(), 0x23);
        assert!(TensorTag::train(MAX_TAG_INDEX + 1, Slot::Cut1Activation)
            .encode()
            .is_err());
        assert!(TensorTag::decode(0x20).is_err());
    }

    #[test]
    fn envelope_layout() {
        let m = ProtocolMessage {
            session_id: 7,
            sequence: 3,
            kind: MessageKind::LossReport,
            payload: 1.5f64.to_le_bytes().to_vec(),
        };
        let b = m.encode();
        assert_eq!(b.len(), ENVELOPE_LEN + 8);
        assert_eq!(&b[..5], b"GTMS\x01");
        assert_eq!(&b[5..13], &7u64.to_le_bytes());
        assert_eq!(&b[13..21], &3u64.to_le_bytes());
        assert_eq!(b[21], 4);
        assert_eq!(&b[22..30], &8u64.to_le_bytes());
        assert_eq!(ProtocolMessage::decode(&b).unwrap(), m);
        assert_eq!(m.direction().unwrap(), Direction::ClientToServer);
        assert_eq!(m.phase().unwrap(), Phase::Train);
    }

    #[test]
    fn transcript_round_trip_and_errors() {
        let ms: Vec<ProtocolMessage> = (0..3)
            .map(|i| ProtocolMessage {
                session_id: 1,
                sequence: i,
                kind: MessageKind::Control,
                payload: vec![control::OPEN; i as usize],
            })
            .collect();
        let b = encode_transcript(&ms);
        assert_eq!(decode_transcript(&b).unwrap(), ms);
        let err = decode_transcript(&b[..b.len() - 1]).unwrap_err();
        assert!(matches!(err, ProtocolError::Decode { .. }));
        let mut bad = b.clone();
        bad[ENVELOPE_LEN + 21] = 9;
        assert!(matches!(
            decode_transcript(&bad),
            Err(ProtocolError::Decode { offset, .. }) if offset == ENVELOPE_LEN + 21
        ));
    }
}
