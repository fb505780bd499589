//! Client/server split fine-tuning as deterministic message exchanges.
//!
//! Three architectures are supported:
//!
//! * [`Architecture::Online`]: activations and gradients cross both cut
//!   points every step.
//! * [`Architecture::Gradfree`]: only the output adapter trains, so only
//!   forward activations cross.
//! * [`Architecture::Offline`]: the client receives the adapters plus an
//!   emulator and trains without any network traffic.
//!
//! Every message passes through a [`Session`], which records the transcript
//! used for byte accounting and by the attack harness.

mod account;
mod endpoint;
pub mod message;
mod session;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::codec::{CodecError, QuantParams};
use crate::decorrelation::DecorrelationConfig;
use crate::model::ModelError;
use crate::optim::AdamConfig;
use crate::tensor::TensorError;

pub use account::{account, CommReport, PhaseBytes};
pub use endpoint::{Client, Server};
pub use message::{
    decode_transcript, encode_transcript, load_transcript, save_transcript, Direction, MessageKind, Phase,
    ProtocolMessage, Slot, TensorTag,
};
pub use session::{Session, StepRecord};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("message out of order: expected sequence {expected}, got {got}")]
    OutOfOrder { expected: u64, got: u64 },
    #[error("message for session {got} on session {expected}")]
    WrongSession { expected: u64, got: u64 },
    #[error("unexpected message: {0}")]
    Unexpected(String),
    #[error("protocol invariant violated: {0}")]
    Invariant(String),
    #[error("protocol precondition violated: {0}")]
    Contract(String),
    #[error("message decode failed at byte {offset}: {reason}")]
    Decode { offset: usize, reason: String },
    #[error("frame: {0}")]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("transcript io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ProtocolError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Online,
    Gradfree,
    Offline,
}

impl Architecture {
    /// Which client segments train: (input adapter, output adapter).
    pub fn client_trains(self) -> (bool, bool) {
        match self {
            Architecture::Online | Architecture::Offline => (true, true),
            Architecture::Gradfree => (false, true),
        }
    }
}

/// Settings both endpoints agree on before a session opens.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolConfig {
    pub architecture: Architecture,
    pub session_id: u64,
    /// `None` sends raw 32-bit frames.
    pub quant: Option<QuantParams>,
    pub decorrelation: DecorrelationConfig,
    pub server_finetunes_backbone: bool,
    pub adam: AdamConfig,
    /// Emulator depth for [`Architecture::Offline`].
    pub emulator_size: usize,
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        self.decorrelation.validate()?;
        if let Some(q) = self.quant {
            if !(1..=16).contains(&q.bits) || !(1..=100).contains(&q.percentile) {
                return Err(ProtocolError::Contract(format!(
                    "quantization bits {} / percentile {} out of range",
                    q.bits, q.percentile
                )));
            }
        }
        Ok(())
    }
}
