use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::codec::decode_tensor;
use crate::model::{BlockStack, InputAdapter, ModelPartition, Params, TokenBatch};
use crate::protocol::{MessageKind, ProtocolMessage, Slot};
use crate::tensor::Tensor;

use super::inverter::train_inverter;
use super::reconstruct::{gradient_matching_attack, reconstruct_from_activations};
use super::rouge::batch_rouge_l;
use super::{AttackConfig, AttackError, AttackReport, Outcome, Result, BATCHES_PER_EVAL};

/// Everything a server-side observer can pull out of a transcript.
#[derive(Clone, Debug, Default)]
pub struct TranscriptView {
    /// First model transfer payload.
    pub shipped: Option<Checkpoint>,
    pub train_activations: BTreeMap<u32, Tensor>,
    /// Gradients the client sent for the backbone output.
    pub train_gradients: BTreeMap<u32, Tensor>,
    pub inference_activations: BTreeMap<u32, Tensor>,
}

impl TranscriptView {
    pub fn from_messages(transcript: &[ProtocolMessage]) -> Result<Self> {
        let mut v = Self::default();
        for m in transcript {
            if m.kind == MessageKind::ModelTransfer && v.shipped.is_none() {
                v.shipped = Some(Checkpoint::from_bytes(&m.payload)?);
            }
            let Some(tag) = m.tag()? else { continue };
            let target = match (tag.inference, tag.slot) {
                (false, Slot::Cut1Activation) => &mut v.train_activations,
                (false, Slot::Cut2Gradient) => &mut v.train_gradients,
                (true, Slot::Cut1Activation) => &mut v.inference_activations,
                _ => continue,
            };
            let (_, t) = decode_tensor(&m.payload)?;
            target.insert(tag.index, t);
        }
        Ok(v)
    }
}

/// Scores of one evaluation point: one ROUGE-L value per batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    /// Step or inference index of every scored batch.
    pub indices: Vec<u32>,
    pub scores: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub points: Vec<EvalPoint>,
    /// Mean over evaluation points.
    pub mean: f64,
}

impl PhaseReport {
    fn from_points(points: Vec<EvalPoint>) -> Self {
        let mean = points.iter().map(|p| p.mean).sum::<f64>() / points.len().max(1) as f64;
        Self { points, mean }
    }
}

/// Training steps `s` with `(s + 1) % cadence == 0`, each paired with the
/// window of batches ending at `s`.
pub fn evaluation_windows(steps_run: u32, cadence: u32) -> Vec<Vec<u32>> {
    let span = BATCHES_PER_EVAL as u32;
    (0..steps_run)
        .filter(|s| (s + 1) % cadence == 0 && *s + 1 >= span)
        .map(|s| (s + 1 - span..=s).collect())
        .collect()
}

/// Inputs to [`evaluate_attack`]. The ground-truth batches stay on the
/// client and are used only for scoring.
pub struct AttackInputs<'a> {
    /// The server's pre-trained model.
    pub pretrained: &'a ModelPartition,
    pub transcript: &'a [ProtocolMessage],
    /// Server backbone weights as used at each training step. Steps without
    /// a snapshot fall back to the pre-trained backbone.
    pub snapshots: &'a BTreeMap<u32, Checkpoint>,
    /// Public corpus for fitting the inverter.
    pub auxiliary: &'a [TokenBatch],
    pub truth_train: &'a BTreeMap<u32, TokenBatch>,
    pub truth_inference: &'a BTreeMap<u32, TokenBatch>,
    pub steps_run: u32,
}

fn truth(map: &BTreeMap<u32, TokenBatch>, i: u32) -> Result<&TokenBatch> {
    map.get(&i)
        .ok_or_else(|| AttackError::Contract(format!("no ground truth for batch {i}")))
}

fn frame<'b>(map: &'b BTreeMap<u32, Tensor>, i: u32, what: &str) -> Result<&'b Tensor> {
    map.get(&i)
        .ok_or_else(|| AttackError::Contract(format!("transcript lacks the {what} of batch {i}")))
}

/// Runs every applicable attack stage on a transcript and scores the
/// reconstructions against the ground truth.
pub fn evaluate_attack(inputs: &AttackInputs, cfg: &AttackConfig) -> Result<AttackReport> {
    cfg.validate()?;
    let view = TranscriptView::from_messages(inputs.transcript)?;
    let model_cfg = &inputs.pretrained.config;
    let adapter = match &view.shipped {
        Some(ck) => InputAdapter::from_checkpoint(model_cfg, ck)?,
        None => inputs.pretrained.input.clone(),
    };
    let inverter = train_inverter(&adapter, inputs.auxiliary, cfg)?;

    let mut best = BTreeMap::new();
    let finetune_activation = if view.train_activations.is_empty() {
        Outcome::NotApplicable
    } else {
        let windows = evaluation_windows(inputs.steps_run, cfg.cadence);
        if windows.is_empty() {
            return Err(AttackError::Contract(format!(
                "{} steps do not reach an evaluation point at cadence {}",
                inputs.steps_run, cfg.cadence
            )));
        }
        let mut points = Vec::new();
        for w in windows {
            let mut scores = Vec::new();
            for &s in &w {
                let a1 = frame(&view.train_activations, s, "activation")?;
                let r = reconstruct_from_activations(&adapter, &inverter, a1, cfg)?;
                scores.push(batch_rouge_l(truth(inputs.truth_train, s)?, &r.tokens));
                best.insert(s, r.tokens);
            }
            points.push(point(w, scores));
        }
        Outcome::Applicable(PhaseReport::from_points(points))
    };

    let finetune_gradient = if !cfg.gradient_match || view.train_gradients.is_empty() || best.is_empty() {
        Outcome::NotApplicable
    } else {
        let mut backbone = inputs.pretrained.backbone.clone();
        let mut points = Vec::new();
        for w in evaluation_windows(inputs.steps_run, cfg.cadence) {
            let mut scores = Vec::new();
            for &s in &w {
                load_backbone(&mut backbone, inputs, s)?;
                let a1 = frame(&view.train_activations, s, "activation")?;
                let g2 = frame(&view.train_gradients, s, "gradient")?;
                let r = gradient_matching_attack(&adapter, &backbone, &inverter, &best[&s], a1, g2, cfg)?;
                scores.push(batch_rouge_l(truth(inputs.truth_train, s)?, &r.tokens));
            }
            points.push(point(w, scores));
        }
        Outcome::Applicable(PhaseReport::from_points(points))
    };

    let inference = if view.inference_activations.is_empty() {
        Outcome::NotApplicable
    } else {
        let indices: Vec<u32> = view
            .inference_activations
            .keys()
            .copied()
            .take(BATCHES_PER_EVAL)
            .collect();
        let mut scores = Vec::new();
        for &i in &indices {
            let r = reconstruct_from_activations(&adapter, &inverter, &view.inference_activations[&i], cfg)?;
            scores.push(batch_rouge_l(truth(inputs.truth_inference, i)?, &r.tokens));
        }
        Outcome::Applicable(PhaseReport::from_points(vec![point(indices, scores)]))
    };

    Ok(AttackReport {
        finetune_activation,
        finetune_gradient,
        inference,
    })
}

fn point(indices: Vec<u32>, scores: Vec<f64>) -> EvalPoint {
    let mean = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
    EvalPoint { indices, scores, mean }
}

fn load_backbone(backbone: &mut BlockStack, inputs: &AttackInputs, step: u32) -> Result<()> {
    match inputs.snapshots.get(&step) {
        Some(ck) => backbone.load_checkpoint(ck)?,
        None => *backbone = inputs.pretrained.backbone.clone(),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_follow_the_cadence() {
        assert_eq!(
            evaluation_windows(100, 50),
            vec![vec![45, 46, 47, 48, 49], vec![95, 96, 97, 98, 99]]
        );
        assert_eq!(evaluation_windows(49, 50), Vec::<Vec<u32>>::new());
        assert_eq!(
            evaluation_windows(10, 5),
            vec![vec![0, 1, 2, 3, 4], vec![5, 6, 7, 8, 9]]
        );
        assert!(evaluation_windows(10, 5).iter().all(|w| w.len() == BATCHES_PER_EVAL));
    }
}
