//! Decoder-only transformer split into input adapter, backbone and output
//! adapter segments, plus emulators built by uniform layer dropping.

mod block;
mod partition;
pub mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::tensor::TensorError;

pub use block::Block;
pub use partition::{
    build_emulator, build_model, emulator_indices, layer_index_of, BlockStack, Bound, Emulator, InputAdapter,
    InputForward, ModelPartition, OutputAdapter, Params,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Layer counts for (input adapter, backbone, output adapter).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split(pub usize, pub usize, pub usize);

impl Split {
    pub fn total(&self) -> usize {
        self.0 + self.1 + self.2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers_total: usize,
    pub max_seq_len: usize,
    pub split: Split,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_heads: 4,
            n_layers_total: 6,
            max_seq_len: 16,
            split: Split(1, 4, 1),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.max_seq_len == 0 {
            return err("vocab_size, d_model, n_heads and max_seq_len must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return err(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.split.total() != self.n_layers_total {
            return err(format!(
                "split {:?} sums to {} but n_layers_total is {}",
                self.split,
                self.split.total(),
                self.n_layers_total
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.d_model
    }
}

/// Token ids for `batch` sequences of length `seq`, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<u32>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != batch * seq {
            return Err(ModelError::Config(format!(
                "{} ids for a {batch}x{seq} batch",
                ids.len()
            )));
        }
        Ok(Self { batch, seq, ids })
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }
}

/// What the loss is computed against.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Targets {
    /// One target per sequence, predicted at the final position.
    Last(Vec<u32>),
    /// One target per position (language modelling).
    Every(Vec<u32>),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledBatch {
    pub tokens: TokenBatch,
    pub targets: Targets,
}
