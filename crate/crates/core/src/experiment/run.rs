//! One end-to-end run: pre-training (cached), zero-shot evaluation, a
//! protocol session, fine-tuned evaluation, transcript attacks and byte
//! accounting.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{
    evaluate_attack, evaluation_windows, AttackConfig, AttackInputs, AttackReport, Outcome, BATCHES_PER_EVAL,
};
use crate::checkpoint::Checkpoint;
use crate::model::train::argmax_last;
use crate::model::{build_model, ModelConfig, ModelPartition, Params, TokenBatch};
use crate::optim::AdamConfig;
use crate::protocol::{load_transcript, save_transcript, CommReport, ProtocolMessage, Session};

use super::tasks::{generate_toy_task, last_targets, Dataset, TaskKind, TaskSpec};
use super::{ArchitectureChoice, ExperimentConfig, ExperimentError, PhaseExt, PretrainConfig, Result, CONFIG_VERSION};

pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_FILE: &str = "report.json";
pub const TRANSCRIPT_FILE: &str = "transcript.gtms";
pub const PRETRAINED_FILE: &str = "pretrained.gtck";
pub const CLIENT_FILE: &str = "client.gtck";
pub const TRUTH_FILE: &str = "client_truth.json";
const SNAPSHOT_DIR: &str = "snapshots";

const ORDER_SALT: u64 = 0x6f72_6465_7200_0001;
const AUX_SALT: u64 = 0x6175_7800_0000_0002;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub zero_shot: f64,
    pub fine_tuned: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub config_hash: String,
    pub architecture: ArchitectureChoice,
    pub task: TaskKind,
    pub seed: u64,
    pub model: ModelConfig,
    pub accuracy: Accuracy,
    /// ROUGE-L F1 of the strongest applicable fine-tune-phase attack.
    pub finetune_privacy: Outcome<f64>,
    pub inference_privacy: Outcome<f64>,
    pub attack: AttackReport,
    pub shared_layer_count: usize,
    pub comm: CommReport,
    /// Total loss at every training step.
    pub loss_curve: Vec<f32>,
    pub wall_time_secs: f64,
}

impl RunReport {
    /// JSON with the wall time zeroed; identical across reruns.
    pub fn canonical_json(&self) -> String {
        let mut r = self.clone();
        r.wall_time_secs = 0.0;
        serde_json::to_string_pretty(&r).expect("report serializes")
    }
}

/// Ground truth kept by the client and used only for scoring.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Truth {
    train: BTreeMap<u32, TokenBatch>,
    inference: BTreeMap<u32, TokenBatch>,
}

/// Everything in a run directory.
pub struct RunArtifacts {
    pub config: ExperimentConfig,
    pub report: RunReport,
    pub transcript: Vec<ProtocolMessage>,
    pub pretrained: ModelPartition,
    pub snapshots: BTreeMap<u32, Checkpoint>,
    truth: Truth,
}

fn pretrain_key(model: &ModelConfig, p: &PretrainConfig, seq_len: usize) -> String {
    let text = format!(
        "{}\n{}\n{seq_len}",
        toml::to_string(model).unwrap_or_default(),
        toml::to_string(p).unwrap_or_default()
    );
    Sha256::digest(text.as_bytes())[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// The server's pre-trained model, loaded from `cache_dir` when present.
pub fn pretrain(
    model: &ModelConfig,
    p: &PretrainConfig,
    seq_len: usize,
    cache_dir: Option<&Path>,
) -> Result<ModelPartition> {
    let cached = cache_dir.map(|d| d.join(format!("pretrained-{}.gtck", pretrain_key(model, p, seq_len))));
    if let Some(path) = cached.as_ref().filter(|p| p.exists()) {
        return Ok(ModelPartition::from_checkpoint(model, &Checkpoint::load(path)?)?);
    }
    let spec = TaskSpec {
        kind: p.task,
        vocab_size: model.vocab_size,
        seq_len,
        train_size: p.examples,
        eval_size: 1,
        ..TaskSpec::default()
    };
    let data = generate_toy_task(&spec, p.seed)?;
    let batches = data.train_batches(p.steps, p.batch_size, p.seed ^ ORDER_SALT)?;
    let mut m = build_model(model, p.seed)?;
    let adam = AdamConfig {
        lr: p.lr,
        ..AdamConfig::default()
    };
    m.fit(adam, &batches)?;
    if let Some(path) = cached {
        fs::create_dir_all(path.parent().expect("joined path has a parent"))?;
        m.to_checkpoint().save(&path)?;
    }
    Ok(m)
}

fn auxiliary_corpus(cfg: &ExperimentConfig) -> Result<Vec<TokenBatch>> {
    let spec = TaskSpec {
        train_size: cfg.auxiliary_size,
        eval_size: 1,
        ..cfg.task.clone()
    };
    let data = generate_toy_task(&spec, cfg.seed ^ AUX_SALT)?;
    let t = cfg.task.seq_len;
    data.train
        .chunks(cfg.train.batch_size)
        .map(|c| {
            let ids = c.iter().flat_map(|e| e.input.iter().copied()).collect();
            Ok(TokenBatch::new(c.len(), t, ids)?)
        })
        .collect()
}

fn attack_config(cfg: &ExperimentConfig) -> AttackConfig {
    AttackConfig {
        seed: cfg.attack.seed.wrapping_add(cfg.seed),
        ..cfg.attack.clone()
    }
}

fn exact_match_total(pred: &[u32], want: &[u32]) -> usize {
    pred.iter().zip(want).filter(|(p, w)| p == w).count()
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)?)?;
    Ok(())
}

/// Runs `cfg` end to end and writes the run directory when `cfg.out_dir` is
/// set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    let started = Instant::now();
    cfg.validate()?;
    let pretrained =
        pretrain(&cfg.model, &cfg.pretrain, cfg.task.seq_len, cfg.cache_dir.as_deref()).phase("pretrain")?;
    let data: Dataset = generate_toy_task(&cfg.task, cfg.seed).phase("data")?;
    let train = data
        .train_batches(cfg.train.steps, cfg.train.batch_size, cfg.seed ^ ORDER_SALT)
        .phase("data")?;
    let eval = data.eval_batches(cfg.train.batch_size).phase("data")?;
    let n_eval: usize = eval.iter().map(|b| b.tokens.batch).sum();

    let mut zero_hits = 0;
    for b in &eval {
        zero_hits += exact_match_total(
            &pretrained.predict_last(&b.tokens).phase("zero-shot eval")?,
            &last_targets(b),
        );
    }

    let windows = evaluation_windows(cfg.train.steps as u32, cfg.attack.cadence);
    let scored: Vec<u32> = windows.iter().flatten().copied().collect();
    let mut session = Session::open_with(cfg.protocol(), &pretrained, |s| s.snapshot_at(scored.iter().copied()))
        .phase("session open")?;
    let mut loss_curve = Vec::with_capacity(train.len());
    for (step, batch) in train.iter().enumerate() {
        let rec = session.train_step(step as u32, batch).phase("fine-tune")?;
        loss_curve.push(rec.loss.total);
    }

    let mut tuned_hits = 0;
    for (i, b) in eval.iter().enumerate() {
        let logits = session.infer(i as u32, &b.tokens).phase("fine-tuned eval")?;
        let pred = argmax_last(logits.data(), b.tokens.batch, b.tokens.seq);
        tuned_hits += exact_match_total(&pred, &last_targets(b));
    }
    let comm = session.close().phase("accounting")?;
    let (client, server, transcript) = session.into_parts();

    let truth = Truth {
        train: scored.iter().map(|&s| (s, train[s as usize].tokens.clone())).collect(),
        inference: (0..BATCHES_PER_EVAL as u32)
            .map(|i| (i, eval[i as usize].tokens.clone()))
            .collect(),
    };
    let aux = auxiliary_corpus(cfg).phase("attack")?;
    let snapshots = server.snapshots().clone();
    let attack = evaluate_attack(
        &AttackInputs {
            pretrained: &pretrained,
            transcript: &transcript,
            snapshots: &snapshots,
            auxiliary: &aux,
            truth_train: &truth.train,
            truth_inference: &truth.inference,
            steps_run: cfg.train.steps as u32,
        },
        &attack_config(cfg),
    )
    .phase("attack")?;

    let report = RunReport {
        version: CONFIG_VERSION,
        config_hash: cfg.content_hash(),
        architecture: cfg.architecture,
        task: cfg.task.kind,
        seed: cfg.seed,
        model: cfg.model.clone(),
        accuracy: Accuracy {
            zero_shot: zero_hits as f64 / n_eval as f64,
            fine_tuned: tuned_hits as f64 / n_eval as f64,
        },
        finetune_privacy: attack
            .finetune_score()
            .map_or(Outcome::NotApplicable, Outcome::Applicable),
        inference_privacy: attack
            .inference_score()
            .map_or(Outcome::NotApplicable, Outcome::Applicable),
        attack,
        shared_layer_count: comm.shared_layer_count,
        comm,
        loss_curve,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };

    if let Some(dir) = &cfg.out_dir {
        (|| -> Result<()> {
            fs::create_dir_all(dir.join(SNAPSHOT_DIR))?;
            fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;
            write_json(&dir.join(REPORT_FILE), &report)?;
            save_transcript(&transcript, dir.join(TRANSCRIPT_FILE))?;
            pretrained.to_checkpoint().save(dir.join(PRETRAINED_FILE))?;
            let mut ck = Checkpoint::new();
            if let Some(p) = client.input() {
                p.write_checkpoint(&mut ck);
            }
            if let Some(p) = client.output() {
                p.write_checkpoint(&mut ck);
            }
            if let Some(e) = client.emulator() {
                e.stack.write_checkpoint(&mut ck);
            }
            ck.save(dir.join(CLIENT_FILE))?;
            for (step, snap) in &snapshots {
                snap.save(dir.join(SNAPSHOT_DIR).join(format!("step-{step}.gtck")))?;
            }
            write_json(&dir.join(TRUTH_FILE), &truth)?;
            Ok(())
        })()
        .phase("write run directory")?;
    }
    Ok(report)
}

/// Reads back a run directory.
pub fn load_run(dir: &Path) -> Result<RunArtifacts> {
    let config = ExperimentConfig::from_toml(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
    let report: RunReport = serde_json::from_str(&fs::read_to_string(dir.join(REPORT_FILE))?)?;
    let transcript = load_transcript(dir.join(TRANSCRIPT_FILE))?;
    let pretrained = ModelPartition::from_checkpoint(&config.model, &Checkpoint::load(dir.join(PRETRAINED_FILE))?)?;
    let mut snapshots = BTreeMap::new();
    let snap_dir: PathBuf = dir.join(SNAPSHOT_DIR);
    if snap_dir.exists() {
        for entry in fs::read_dir(&snap_dir)? {
            let path = entry?.path();
            let step = path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.strip_prefix("step-"))
                .and_then(|s| s.parse::<u32>().ok())
                .ok_or_else(|| ExperimentError::Config(format!("unexpected snapshot file {}", path.display())))?;
            snapshots.insert(step, Checkpoint::load(&path)?);
        }
    }
    let truth: Truth = serde_json::from_str(&fs::read_to_string(dir.join(TRUTH_FILE))?)?;
    Ok(RunArtifacts {
        config,
        report,
        transcript,
        pretrained,
        snapshots,
        truth,
    })
}

/// Re-runs the attacks on a stored run without retraining. `attack`
/// replaces the stored attack settings when given.
pub fn rerun_attack(dir: &Path, attack: Option<AttackConfig>) -> Result<AttackReport> {
    let run = load_run(dir)?;
    let mut cfg = run.config.clone();
    if let Some(a) = attack {
        cfg.attack = a;
        cfg.validate()?;
    }
    let aux = auxiliary_corpus(&cfg)?;
    Ok(evaluate_attack(
        &AttackInputs {
            pretrained: &run.pretrained,
            transcript: &run.transcript,
            snapshots: &run.snapshots,
            auxiliary: &aux,
            truth_train: &run.truth.train,
            truth_inference: &run.truth.inference,
            steps_run: cfg.train.steps as u32,
        },
        &attack_config(&cfg),
    )?)
}
