//! Experiment configuration, synthetic tasks, run orchestration and report
//! tables.

mod compare;
mod run;
pub mod tasks;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attack::{AttackConfig, AttackError, BATCHES_PER_EVAL};
use crate::checkpoint::CheckpointError;
use crate::codec::QuantParams;
use crate::decorrelation::DecorrelationConfig;
use crate::model::{ModelConfig, ModelError};
use crate::optim::AdamConfig;
use crate::protocol::{Architecture, ProtocolConfig, ProtocolError};

pub use compare::{emit_comparison, parse_comparison_csv, Comparison, ComparisonRow};
pub use run::{
    load_run, pretrain, rerun_attack, run_experiment, Accuracy, RunArtifacts, RunReport, REPORT_FILE, TRANSCRIPT_FILE,
};
pub use tasks::{generate_toy_task, Dataset, Example, TaskKind, TaskSpec};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{phase}: {inner}")]
    Phase {
        phase: &'static str,
        inner: Box<ExperimentError>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

/// Tags an error with the run phase it came from.
pub(crate) trait PhaseExt<T> {
    fn phase(self, phase: &'static str) -> Result<T>;
}

impl<T, E: Into<ExperimentError>> PhaseExt<T> for std::result::Result<T, E> {
    fn phase(self, phase: &'static str) -> Result<T> {
        self.map_err(|e| ExperimentError::Phase {
            phase,
            inner: Box::new(e.into()),
        })
    }
}

/// The four compared designs. `Sl` is Online without quantization or
/// decorrelation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchitectureChoice {
    Sl,
    Online,
    Gradfree,
    Offline,
}

impl ArchitectureChoice {
    pub const ALL: [ArchitectureChoice; 4] = [Self::Sl, Self::Online, Self::Gradfree, Self::Offline];

    pub fn protocol(self) -> Architecture {
        match self {
            Self::Sl | Self::Online => Architecture::Online,
            Self::Gradfree => Architecture::Gradfree,
            Self::Offline => Architecture::Offline,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Sl => "sl",
            Self::Online => "online",
            Self::Gradfree => "gradfree",
            Self::Offline => "offline",
        }
    }
}

impl std::str::FromStr for ArchitectureChoice {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| ExperimentError::Config(format!("architecture: unknown `{s}`")))
    }
}

/// Server-side language-model pre-training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub seed: u64,
    pub task: TaskKind,
    pub examples: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            task: TaskKind::PatternCompletion,
            examples: 4000,
            steps: 300,
            batch_size: 16,
            lr: 3e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub emulator_size: usize,
    pub server_finetunes_backbone: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 16,
            adam: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            emulator_size: 2,
            server_finetunes_backbone: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseConfig {
    pub lambda: f32,
    pub epsilon: f32,
    pub detach_embedding: bool,
    pub quantize: bool,
    pub bits: u8,
    pub percentile: u8,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        let d = DecorrelationConfig::default();
        Self {
            lambda: d.lambda,
            epsilon: d.epsilon,
            detach_embedding: d.detach_embedding,
            quantize: true,
            bits: 8,
            percentile: 99,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub architecture: ArchitectureChoice,
    /// Where the run directory goes. Not part of the content hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Directory for cached pre-trained models. Not part of the content hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub task: TaskSpec,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub defense: DefenseConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    /// Sequences in the attacker's auxiliary corpus.
    #[serde(default = "default_aux")]
    pub auxiliary_size: usize,
}

fn default_aux() -> usize {
    2000
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            architecture: ArchitectureChoice::Online,
            out_dir: None,
            cache_dir: None,
            model: ModelConfig::default(),
            task: TaskSpec::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            defense: DefenseConfig::default(),
            attack: AttackConfig::default(),
            auxiliary_size: default_aux(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    /// Checks every field; errors name the offending key.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("version: expected {CONFIG_VERSION}, got {}", self.version));
        }
        self.model
            .validate()
            .map_err(|e| ExperimentError::Config(format!("model: {e}")))?;
        self.task.validate()?;
        if self.task.vocab_size != self.model.vocab_size {
            return bad(format!(
                "task.vocab_size: {} differs from model.vocab_size {}",
                self.task.vocab_size, self.model.vocab_size
            ));
        }
        if self.task.seq_len > self.model.max_seq_len {
            return bad(format!(
                "task.seq_len: {} exceeds model.max_seq_len {}",
                self.task.seq_len, self.model.max_seq_len
            ));
        }
        let p = &self.pretrain;
        if p.steps == 0 || p.batch_size == 0 || p.batch_size > p.examples {
            return bad("pretrain: steps and batch_size must be positive and batch_size <= examples".into());
        }
        if !(p.lr > 0.0 && p.lr.is_finite()) {
            return bad(format!("pretrain.lr: {} must be positive", p.lr));
        }
        let t = &self.train;
        if t.steps == 0 || t.batch_size == 0 || t.batch_size > self.task.train_size {
            return bad("train: steps and batch_size must be positive and batch_size <= task.train_size".into());
        }
        if !(t.adam.lr > 0.0 && t.adam.lr.is_finite()) {
            return bad(format!("train.adam.lr: {} must be positive", t.adam.lr));
        }
        if self.architecture == ArchitectureChoice::Offline && !(2..=self.model.split.1).contains(&t.emulator_size) {
            return bad(format!(
                "train.emulator_size: {} outside 2..={}",
                t.emulator_size, self.model.split.1
            ));
        }
        if self.task.eval_size < BATCHES_PER_EVAL * t.batch_size {
            return bad(format!(
                "task.eval_size: {} is fewer than {BATCHES_PER_EVAL} full eval batches",
                self.task.eval_size
            ));
        }
        let d = &self.defense;
        self.decorrelation()
            .validate()
            .map_err(|e| ExperimentError::Config(format!("defense: {e}")))?;
        if d.quantize && (!(1..=16).contains(&d.bits) || !(1..=100).contains(&d.percentile)) {
            return bad(format!(
                "defense: bits {} / percentile {} out of range",
                d.bits, d.percentile
            ));
        }
        self.attack
            .validate()
            .map_err(|e| ExperimentError::Config(format!("attack: {e}")))?;
        if self.attack.cadence as usize > t.steps {
            return bad(format!(
                "attack.cadence: {} exceeds train.steps {}",
                self.attack.cadence, t.steps
            ));
        }
        if self.auxiliary_size < self.train.batch_size {
            return bad(format!("auxiliary_size: {} is below one batch", self.auxiliary_size));
        }
        Ok(())
    }

    /// Decorrelation in effect; always off for the split-learning baseline.
    pub fn decorrelation(&self) -> DecorrelationConfig {
        if self.architecture == ArchitectureChoice::Sl {
            return DecorrelationConfig::off();
        }
        DecorrelationConfig {
            lambda: self.defense.lambda,
            epsilon: self.defense.epsilon,
            detach_embedding: self.defense.detach_embedding,
        }
    }

    pub fn quantization(&self) -> Option<QuantParams> {
        (self.architecture != ArchitectureChoice::Sl && self.defense.quantize).then_some(QuantParams {
            bits: self.defense.bits,
            percentile: self.defense.percentile,
        })
    }

    pub fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            architecture: self.architecture.protocol(),
            session_id: self.seed,
            quant: self.quantization(),
            decorrelation: self.decorrelation(),
            server_finetunes_backbone: self.train.server_finetunes_backbone,
            adam: self.train.adam,
            emulator_size: self.train.emulator_size,
        }
    }

    /// SHA-256 over the canonical serialization, excluding output and cache
    /// locations.
    pub fn content_hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        c.cache_dir = None;
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
