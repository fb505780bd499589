//! Data-reconstruction attacks run by a curious server against recorded
//! transcripts.
//!
//! Stages:
//!
//! 1. An inverter network is trained on an auxiliary corpus pushed through
//!    the input adapter the server shipped.
//! 2. Observed cut-point activations are decoded by the inverter (argmax).
//! 3. A continuous relaxation of the token choice is refined so that the
//!    re-encoded activations match the observed ones.
//!
//! When gradient frames are present, a further discrete search scores
//! candidate tokens on both activation and gradient agreement.

mod evaluate;
mod inverter;
mod reconstruct;
mod rouge;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::codec::CodecError;
use crate::model::ModelError;
use crate::protocol::ProtocolError;
use crate::tensor::TensorError;

pub use evaluate::{evaluate_attack, evaluation_windows, AttackInputs, EvalPoint, PhaseReport, TranscriptView};
pub use inverter::{train_inverter, Inverter};
pub use reconstruct::{activation_mismatch, gradient_matching_attack, reconstruct_from_activations, Reconstruction};
pub use rouge::{batch_rouge_l, rouge_l_f1};

/// Number of batches scored at every evaluation point.
pub const BATCHES_PER_EVAL: usize = 5;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack configuration: {0}")]
    Config(String),
    #[error("attack precondition violated: {0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T, E = AttackError> = std::result::Result<T, E>;

/// Either a value or an explicit statement that the attack cannot run on
/// what the server observed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome<T> {
    NotApplicable,
    Applicable(T),
}

impl<T> Outcome<T> {
    pub fn as_option(&self) -> Option<&T> {
        match self {
            Outcome::Applicable(v) => Some(v),
            Outcome::NotApplicable => None,
        }
    }

    pub fn is_applicable(&self) -> bool {
        matches!(self, Outcome::Applicable(_))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub inverter: bool,
    pub activation_match: bool,
    pub gradient_match: bool,
    pub inverter_hidden: usize,
    pub inverter_steps: usize,
    pub inverter_lr: f32,
    /// Refinement iterations of the continuous relaxation.
    pub refine_steps: usize,
    pub refine_lr: f32,
    /// Candidate tokens per position for the gradient-matching search.
    pub top_k: usize,
    pub search_rounds: usize,
    /// Training steps between evaluation points.
    pub cadence: u32,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            inverter: true,
            activation_match: true,
            gradient_match: true,
            inverter_hidden: 128,
            inverter_steps: 400,
            inverter_lr: 3e-3,
            refine_steps: 20,
            refine_lr: 2.0,
            top_k: 3,
            search_rounds: 1,
            cadence: 100,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AttackError::Config(m.to_string()));
        if !self.inverter {
            return bad("every stage starts from the inverter; it cannot be disabled");
        }
        if self.inverter_hidden == 0 || self.inverter_steps == 0 {
            return bad("inverter_hidden and inverter_steps must be positive");
        }
        if !(self.inverter_lr > 0.0 && self.refine_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.top_k == 0 {
            return bad("top_k must be positive");
        }
        if (self.cadence as usize) < BATCHES_PER_EVAL {
            return bad("cadence must cover at least the five scored batches");
        }
        Ok(())
    }
}

/// Scores of the attack stages for one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    /// Inverter plus activation refinement on training-phase frames.
    pub finetune_activation: Outcome<PhaseReport>,
    /// Gradient-matching search on training-phase frames.
    pub finetune_gradient: Outcome<PhaseReport>,
    pub inference: Outcome<PhaseReport>,
}

impl AttackReport {
    /// Fine-tune-phase score of the last stage that ran: gradient matching
    /// when applicable, otherwise the activation-only attack.
    pub fn finetune_score(&self) -> Option<f64> {
        self.finetune_gradient
            .as_option()
            .or(self.finetune_activation.as_option())
            .map(|p| p.mean)
    }

    pub fn inference_score(&self) -> Option<f64> {
        self.inference.as_option().map(|p| p.mean)
    }
}
