//! Single-machine training and prediction over the three segments.
//!
//! The middle segment is any [`BlockStack`]: the server backbone, or an
//! emulator when the client trains on its own.

use crate::autodiff::{Tape, Var};
use crate::decorrelation::{composite_loss, token_rows, DecorrelationConfig};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::TensorError;

use super::partition::{BlockStack, Bound, InputAdapter, OutputAdapter, Params};
use super::{LabeledBatch, ModelPartition, Result, Targets, TokenBatch};

/// Logit rows and class indices the loss is computed over.
pub fn loss_rows(tape: &mut Tape, logits: Var, batch: &LabeledBatch) -> Result<(Var, Vec<usize>)> {
    let s = tape.shape(logits).to_vec();
    let (b, t, v) = (s[0], s[1], s[2]);
    let flat = tape.reshape(logits, &[b * t, v])?;
    match &batch.targets {
        Targets::Every(ids) => {
            if ids.len() != b * t {
                return Err(TensorError::Dimension(format!("{} targets for {b}x{t} positions", ids.len())).into());
            }
            Ok((flat, ids.iter().map(|&i| i as usize).collect()))
        }
        Targets::Last(ids) => {
            if ids.len() != b {
                return Err(TensorError::Dimension(format!("{} targets for {b} sequences", ids.len())).into());
            }
            let last: Vec<usize> = (0..b).map(|i| i * t + t - 1).collect();
            let rows = tape.gather(flat, &last)?;
            Ok((rows, ids.iter().map(|&i| i as usize).collect()))
        }
    }
}

/// Optimizer state per segment; `None` freezes the segment.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentOptimizers {
    pub adam: AdamConfig,
    pub input: Option<AdamState>,
    pub middle: Option<AdamState>,
    pub output: Option<AdamState>,
}

impl SegmentOptimizers {
    pub fn new(
        adam: AdamConfig,
        input: &InputAdapter,
        middle: &BlockStack,
        output: &OutputAdapter,
        trainable: [bool; 3],
    ) -> Self {
        let state = |on: bool, named: Vec<(String, &crate::tensor::Tensor)>| {
            on.then(|| AdamState::new(named.into_iter().map(|(_, t)| t)))
        };
        Self {
            adam,
            input: state(trainable[0], input.named()),
            middle: state(trainable[1], middle.named()),
            output: state(trainable[2], output.named()),
        }
    }

    pub fn trainable(&self) -> [bool; 3] {
        [self.input.is_some(), self.middle.is_some(), self.output.is_some()]
    }
}

/// Loss values observed during one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub total: f32,
    pub task: f32,
    pub dcor: Option<f32>,
}

/// Applies one Adam update to `params` from the gradients on `bound`.
pub(crate) fn update<P: Params + ?Sized>(
    params: &mut P,
    grads: &crate::autodiff::Gradients,
    bound: &Bound,
    state: &mut AdamState,
    adam: &AdamConfig,
) -> Result<()> {
    params.store_grads(grads, bound)?;
    adam_step(&mut params.tensors_mut(), state, adam)?;
    params.clear_grads();
    Ok(())
}

/// Forward, composite loss, backward and an update of every trainable
/// segment, all on one tape.
pub fn train_step(
    input: &mut InputAdapter,
    middle: &mut BlockStack,
    output: &mut OutputAdapter,
    opt: &mut SegmentOptimizers,
    batch: &LabeledBatch,
    dcor: &DecorrelationConfig,
) -> Result<StepLoss> {
    let [ti, tm, to] = opt.trainable();
    let mut tape = Tape::new();
    let bi = input.bind(&mut tape, ti)?;
    let bm = middle.bind(&mut tape, tm)?;
    let bo = output.bind(&mut tape, to)?;
    let inp = input.forward(&mut tape, &bi, &batch.tokens)?;
    let mid = middle.forward(&mut tape, &bm, inp.out)?;
    let logits = output.forward(&mut tape, &bo, mid)?;
    let (rows, targets) = loss_rows(&mut tape, logits, batch)?;
    let (emb, theta) = if dcor.lambda == 0.0 {
        (inp.emb, inp.out)
    } else {
        (token_rows(&mut tape, inp.emb)?, token_rows(&mut tape, inp.out)?)
    };
    let loss = composite_loss(&mut tape, rows, &targets, emb, theta, dcor)?;
    let out = StepLoss {
        total: tape.value(loss.total).data()[0],
        task: tape.value(loss.task).data()[0],
        dcor: loss.dcor.map(|d| tape.value(d).data()[0]),
    };
    let grads = tape.backward(loss.total)?;
    let adam = opt.adam;
    if let Some(st) = opt.input.as_mut() {
        update(input, &grads, &bi, st, &adam)?;
    }
    if let Some(st) = opt.middle.as_mut() {
        update(middle, &grads, &bm, st, &adam)?;
    }
    if let Some(st) = opt.output.as_mut() {
        update(output, &grads, &bo, st, &adam)?;
    }
    Ok(out)
}

/// Greedy prediction at the final position of every sequence.
pub fn predict_last(
    input: &InputAdapter,
    middle: &BlockStack,
    output: &OutputAdapter,
    tokens: &TokenBatch,
) -> Result<Vec<u32>> {
    let mut tape = Tape::new();
    let bi = input.bind(&mut tape, false)?;
    let bm = middle.bind(&mut tape, false)?;
    let bo = output.bind(&mut tape, false)?;
    let inp = input.forward(&mut tape, &bi, tokens)?;
    let mid = middle.forward(&mut tape, &bm, inp.out)?;
    let logits = output.forward(&mut tape, &bo, mid)?;
    Ok(argmax_last(tape.value(logits).data(), tokens.batch, tokens.seq))
}

/// Index of the largest logit at the last position of each sequence; ties
/// go to the lowest index.
pub fn argmax_last(logits: &[f32], batch: usize, seq: usize) -> Vec<u32> {
    let v = logits.len() / (batch * seq).max(1);
    (0..batch)
        .map(|b| {
            let row = &logits[((b + 1) * seq - 1) * v..(b + 1) * seq * v];
            argmax(row) as u32
        })
        .collect()
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of sequences whose final-position prediction equals the target.
pub fn exact_match(predicted: &[u32], targets: &[u32]) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(targets).filter(|(p, t)| p == t).count();
    hits as f64 / targets.len() as f64
}

impl ModelPartition {
    /// Trains every segment on `batches` in order.
    pub fn fit<'a>(
        &mut self,
        adam: AdamConfig,
        batches: impl IntoIterator<Item = &'a LabeledBatch>,
    ) -> Result<Vec<StepLoss>> {
        let mut opt = SegmentOptimizers::new(adam, &self.input, &self.backbone, &self.output, [true; 3]);
        batches
            .into_iter()
            .map(|b| {
                train_step(
                    &mut self.input,
                    &mut self.backbone,
                    &mut self.output,
                    &mut opt,
                    b,
                    &DecorrelationConfig::off(),
                )
            })
            .collect()
    }

    pub fn predict_last(&self, tokens: &TokenBatch) -> Result<Vec<u32>> {
        predict_last(&self.input, &self.backbone, &self.output, tokens)
    }
}
