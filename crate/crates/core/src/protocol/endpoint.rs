//! The two endpoints. Each processes its inbox strictly in order and keeps
//! whatever tape it needs between the messages of one training step.

use std::collections::{BTreeMap, BTreeSet};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::codec::{decode_tensor, encode_tensor};
use crate::decorrelation::{regularizer, token_rows};
use crate::model::train::{loss_rows, predict_last, train_step, update, SegmentOptimizers, StepLoss};
use crate::model::{
    build_emulator, BlockStack, Bound, Emulator, InputAdapter, LabeledBatch, ModelConfig, ModelPartition,
    OutputAdapter, Params, TokenBatch,
};
use crate::optim::AdamState;
use crate::tensor::Tensor;

use super::message::{control, Direction, MessageKind, ProtocolMessage, Slot, TensorTag};
use super::{Architecture, ProtocolConfig, ProtocolError, Result};

/// Per-direction sequence bookkeeping shared by both endpoints.
#[derive(Clone, Debug, Default, PartialEq)]
struct Sequencer {
    next_out: u64,
    next_in: u64,
}

impl Sequencer {
    fn message(&mut self, session_id: u64, kind: MessageKind, payload: Vec<u8>) -> ProtocolMessage {
        let m = ProtocolMessage {
            session_id,
            sequence: self.next_out,
            kind,
            payload,
        };
        self.next_out += 1;
        m
    }

    fn accept(&mut self, session_id: u64, msg: &ProtocolMessage, from: Direction) -> Result<()> {
        if msg.session_id != session_id {
            return Err(ProtocolError::WrongSession {
                expected: session_id,
                got: msg.session_id,
            });
        }
        if msg.sequence != self.next_in {
            return Err(ProtocolError::OutOfOrder {
                expected: self.next_in,
                got: msg.sequence,
            });
        }
        if msg.direction()? != from {
            return Err(ProtocolError::Unexpected(format!(
                "{:?} travelling the wrong way",
                msg.kind
            )));
        }
        self.next_in += 1;
        Ok(())
    }
}

fn expect_tag(msg: &ProtocolMessage, want: TensorTag) -> Result<Tensor> {
    let tag = msg
        .tag()?
        .ok_or_else(|| ProtocolError::Unexpected(format!("{:?} carries no tensor", msg.kind)))?;
    if tag != want {
        return Err(ProtocolError::Unexpected(format!("expected {want:?}, got {tag:?}")));
    }
    let (_, t) = decode_tensor(&msg.payload)?;
    Ok(t)
}

/// Adapters (and for Offline the emulator) as shipped to the client.
fn transfer_checkpoint(cfg: &ProtocolConfig, model: &ModelPartition) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    model.input.write_checkpoint(&mut ck);
    model.output.write_checkpoint(&mut ck);
    if cfg.architecture == Architecture::Offline {
        build_emulator(&model.backbone, cfg.emulator_size)?
            .stack
            .write_checkpoint(&mut ck);
    }
    Ok(ck)
}

struct ServerPending {
    step: u32,
    tape: Tape,
    bound: Bound,
    input: Var,
    output: Var,
}

/// The model provider: holds the backbone and answers client messages.
pub struct Server {
    cfg: ProtocolConfig,
    backbone: BlockStack,
    opt: Option<AdamState>,
    transfer: Checkpoint,
    pending: Option<ServerPending>,
    seq: Sequencer,
    closed: bool,
    snapshot_steps: BTreeSet<u32>,
    snapshots: BTreeMap<u32, Checkpoint>,
    losses: Vec<f64>,
}

impl Server {
    pub fn new(cfg: ProtocolConfig, model: &ModelPartition) -> Result<Self> {
        cfg.validate()?;
        let transfer = transfer_checkpoint(&cfg, model)?;
        let trains = cfg.architecture == Architecture::Online && cfg.server_finetunes_backbone;
        let opt = trains.then(|| AdamState::new(model.backbone.named().into_iter().map(|(_, t)| t)));
        Ok(Self {
            cfg,
            backbone: model.backbone.clone(),
            opt,
            transfer,
            pending: None,
            seq: Sequencer::default(),
            closed: false,
            snapshot_steps: BTreeSet::new(),
            snapshots: BTreeMap::new(),
            losses: Vec::new(),
        })
    }

    /// Keeps a copy of the backbone as used for the forward pass of each
    /// listed training step.
    pub fn snapshot_at(&mut self, steps: impl IntoIterator<Item = u32>) {
        self.snapshot_steps.extend(steps);
    }

    pub fn snapshots(&self) -> &BTreeMap<u32, Checkpoint> {
        &self.snapshots
    }

    pub fn backbone(&self) -> &BlockStack {
        &self.backbone
    }

    pub fn shipped(&self) -> &Checkpoint {
        &self.transfer
    }

    pub fn reported_losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    fn reply(&mut self, kind: MessageKind, payload: Vec<u8>) -> ProtocolMessage {
        self.seq.message(self.cfg.session_id, kind, payload)
    }

    fn tensor_reply(&mut self, t: &Tensor, tag: TensorTag) -> Result<ProtocolMessage> {
        let payload = encode_tensor(t, tag.encode()?, self.cfg.quant)?;
        Ok(self.reply(tag.slot.kind(), payload))
    }

    /// Processes one client message and returns the replies, in order.
    pub fn handle(&mut self, msg: &ProtocolMessage) -> Result<Vec<ProtocolMessage>> {
        self.seq.accept(self.cfg.session_id, msg, Direction::ClientToServer)?;
        if self.closed {
            return Err(ProtocolError::Unexpected("message after close".into()));
        }
        match msg.kind {
            MessageKind::Control => match msg.payload.as_slice() {
                [control::OPEN] => {
                    let bytes = self.transfer.to_bytes();
                    Ok(vec![self.reply(MessageKind::ModelTransfer, bytes)])
                }
                [control::CLOSE] => {
                    self.closed = true;
                    Ok(vec![])
                }
                other => Err(ProtocolError::Unexpected(format!("control payload {other:?}"))),
            },
            MessageKind::LossReport => {
                let b: [u8; 8] = msg
                    .payload
                    .as_slice()
                    .try_into()
                    .map_err(|_| ProtocolError::Unexpected("loss report must be 8 bytes".into()))?;
                self.losses.push(f64::from_le_bytes(b));
                Ok(vec![])
            }
            MessageKind::ActivationFrame => self.on_activation(msg),
            MessageKind::GradientFrame => self.on_gradient(msg),
            MessageKind::ModelTransfer => unreachable!("rejected by direction check"),
        }
    }

    fn on_activation(&mut self, msg: &ProtocolMessage) -> Result<Vec<ProtocolMessage>> {
        let tag = msg.tag()?.expect("activation frame");
        if tag.slot != Slot::Cut1Activation {
            return Err(ProtocolError::Unexpected(format!("server received {:?}", tag.slot)));
        }
        let (_, a1) = decode_tensor(&msg.payload)?;
        if tag.inference {
            let mut tape = Tape::new();
            let bound = self.backbone.bind(&mut tape, false)?;
            let x = tape.constant(a1)?;
            let out = self.backbone.forward(&mut tape, &bound, x)?;
            let a2 = tape.value(out).clone();
            return Ok(vec![
                self.tensor_reply(&a2, TensorTag::inference(tag.index, Slot::Cut2Activation))?
            ]);
        }
        match self.cfg.architecture {
            Architecture::Offline => {
                return Err(ProtocolError::Invariant(
                    "per-step activation during offline fine-tuning".into(),
                ))
            }
            Architecture::Online | Architecture::Gradfree => {}
        }
        if self.pending.is_some() {
            return Err(ProtocolError::Unexpected(
                "new step before the previous one finished".into(),
            ));
        }
        if self.snapshot_steps.contains(&tag.index) {
            let mut ck = Checkpoint::new();
            self.backbone.write_checkpoint(&mut ck);
            self.snapshots.insert(tag.index, ck);
        }
        let online = self.cfg.architecture == Architecture::Online;
        let mut tape = Tape::new();
        let bound = self.backbone.bind(&mut tape, self.opt.is_some())?;
        let input = if online { tape.param(a1)? } else { tape.constant(a1)? };
        let output = self.backbone.forward(&mut tape, &bound, input)?;
        let a2 = tape.value(output).clone();
        let reply = self.tensor_reply(&a2, TensorTag::train(tag.index, Slot::Cut2Activation))?;
        if online {
            self.pending = Some(ServerPending {
                step: tag.index,
                tape,
                bound,
                input,
                output,
            });
        }
        Ok(vec![reply])
    }

    fn on_gradient(&mut self, msg: &ProtocolMessage) -> Result<Vec<ProtocolMessage>> {
        if self.cfg.architecture != Architecture::Online {
            return Err(ProtocolError::Invariant(format!(
                "gradient frame in a {:?} session",
                self.cfg.architecture
            )));
        }
        let p = self
            .pending
            .take()
            .ok_or_else(|| ProtocolError::Unexpected("gradient without a pending forward".into()))?;
        let g2 = expect_tag(msg, TensorTag::train(p.step, Slot::Cut2Gradient))?;
        let grads = p.tape.backward_seeded(&[(p.output, g2.into_data())])?;
        let g1 = grads.tensor(p.input);
        if let Some(st) = self.opt.as_mut() {
            update(&mut self.backbone, &grads, &p.bound, st, &self.cfg.adam)?;
        }
        Ok(vec![
            self.tensor_reply(&g1, TensorTag::train(p.step, Slot::Cut1Gradient))?
        ])
    }
}

struct ClientModel {
    input: InputAdapter,
    output: OutputAdapter,
    emulator: Option<Emulator>,
    opt: SegmentOptimizers,
}

struct ClientPending {
    step: u32,
    tape: Option<(Tape, Bound, Var, Option<Var>)>,
}

/// The data owner: holds the adapters and its private batches.
pub struct Client {
    cfg: ProtocolConfig,
    model_cfg: ModelConfig,
    model: Option<ClientModel>,
    pending: Option<ClientPending>,
    pending_inference: Option<u32>,
    seq: Sequencer,
}

impl Client {
    pub fn new(cfg: ProtocolConfig, model_cfg: ModelConfig) -> Self {
        Self {
            cfg,
            model_cfg,
            model: None,
            pending: None,
            pending_inference: None,
            seq: Sequencer::default(),
        }
    }

    fn model(&self) -> Result<&ClientModel> {
        self.model
            .as_ref()
            .ok_or_else(|| ProtocolError::Unexpected("client has not received its adapters".into()))
    }

    fn model_mut(&mut self) -> Result<&mut ClientModel> {
        self.model
            .as_mut()
            .ok_or_else(|| ProtocolError::Unexpected("client has not received its adapters".into()))
    }

    pub fn input(&self) -> Option<&InputAdapter> {
        self.model.as_ref().map(|m| &m.input)
    }

    pub fn output(&self) -> Option<&OutputAdapter> {
        self.model.as_ref().map(|m| &m.output)
    }

    pub fn emulator(&self) -> Option<&Emulator> {
        self.model.as_ref().and_then(|m| m.emulator.as_ref())
    }

    fn send(&mut self, kind: MessageKind, payload: Vec<u8>) -> ProtocolMessage {
        self.seq.message(self.cfg.session_id, kind, payload)
    }

    fn send_tensor(&mut self, t: &Tensor, tag: TensorTag) -> Result<ProtocolMessage> {
        let payload = encode_tensor(t, tag.encode()?, self.cfg.quant)?;
        Ok(self.send(tag.slot.kind(), payload))
    }

    pub fn open(&mut self) -> ProtocolMessage {
        self.send(MessageKind::Control, vec![control::OPEN])
    }

    pub fn close(&mut self) -> ProtocolMessage {
        self.send(MessageKind::Control, vec![control::CLOSE])
    }

    pub fn on_transfer(&mut self, msg: &ProtocolMessage) -> Result<()> {
        self.seq.accept(self.cfg.session_id, msg, Direction::ServerToClient)?;
        if msg.kind != MessageKind::ModelTransfer || self.model.is_some() {
            return Err(ProtocolError::Unexpected(format!(
                "{:?} instead of one model transfer",
                msg.kind
            )));
        }
        let ck = Checkpoint::from_bytes(&msg.payload)?;
        let input = InputAdapter::from_checkpoint(&self.model_cfg, &ck)?;
        let output = OutputAdapter::from_checkpoint(&self.model_cfg, &ck)?;
        let emulator = match self.cfg.architecture {
            Architecture::Offline => Some(Emulator::from_checkpoint(&self.model_cfg, &ck)?),
            _ => None,
        };
        let (ti, to) = self.cfg.architecture.client_trains();
        let state = |on: bool, p: &dyn Params| on.then(|| AdamState::new(p.named().into_iter().map(|(_, t)| t)));
        let opt = SegmentOptimizers {
            adam: self.cfg.adam,
            input: state(ti, &input),
            middle: None,
            output: state(to, &output),
        };
        self.model = Some(ClientModel {
            input,
            output,
            emulator,
            opt,
        });
        Ok(())
    }

    /// Runs the input adapter on a private batch and emits the cut-point
    /// activation.
    pub fn begin_train_step(&mut self, step: u32, batch: &LabeledBatch) -> Result<ProtocolMessage> {
        if self.pending.is_some() {
            return Err(ProtocolError::Unexpected("previous step still in flight".into()));
        }
        let dcfg = self.cfg.decorrelation;
        let m = self.model()?;
        let trains_input = m.opt.input.is_some();
        let mut tape = Tape::new();
        let bound = m.input.bind(&mut tape, trains_input)?;
        let f = m.input.forward(&mut tape, &bound, &batch.tokens)?;
        let a1 = tape.value(f.out).clone();
        let dcor = if trains_input && dcfg.lambda != 0.0 {
            let emb = token_rows(&mut tape, f.emb)?;
            let theta = token_rows(&mut tape, f.out)?;
            Some(regularizer(&mut tape, emb, theta, &dcfg)?)
        } else {
            None
        };
        let msg = self.send_tensor(&a1, TensorTag::train(step, Slot::Cut1Activation))?;
        self.pending = Some(ClientPending {
            step,
            tape: trains_input.then_some((tape, bound, f.out, dcor)),
        });
        Ok(msg)
    }

    /// Finishes the forward pass on the returned backbone output, updates
    /// the output adapter and, for Online, emits the loss report and the
    /// cut-point gradient.
    pub fn on_train_activation(
        &mut self,
        msg: &ProtocolMessage,
        batch: &LabeledBatch,
    ) -> Result<(Vec<ProtocolMessage>, StepLoss)> {
        self.seq.accept(self.cfg.session_id, msg, Direction::ServerToClient)?;
        let step = self
            .pending
            .as_ref()
            .ok_or_else(|| ProtocolError::Unexpected("activation without a step in flight".into()))?
            .step;
        let a2 = expect_tag(msg, TensorTag::train(step, Slot::Cut2Activation))?;
        let online = self.cfg.architecture == Architecture::Online;
        let lambda = self.cfg.decorrelation.lambda;
        let m = self.model_mut()?;
        let mut tape = Tape::new();
        let x = if online { tape.param(a2)? } else { tape.constant(a2)? };
        let bound = m.output.bind(&mut tape, true)?;
        let logits = m.output.forward(&mut tape, &bound, x)?;
        let (rows, targets) = loss_rows(&mut tape, logits, batch)?;
        let task_var = tape.cross_entropy(rows, &targets)?;
        let task = tape.value(task_var).data()[0];
        let grads = tape.backward(task_var)?;
        let adam = m.opt.adam;
        if let Some(st) = m.opt.output.as_mut() {
            update(&mut m.output, &grads, &bound, st, &adam)?;
        }
        let dcor = self
            .pending
            .as_ref()
            .and_then(|p| p.tape.as_ref())
            .and_then(|(t, _, _, d)| d.map(|d| t.value(d).data()[0]));
        let total = match dcor {
            Some(d) => task + d * lambda,
            None => task,
        };
        let loss = StepLoss { total, task, dcor };
        if !online {
            self.pending = None;
            return Ok((vec![], loss));
        }
        let g2 = grads.tensor(x);
        let report = self.send(MessageKind::LossReport, (total as f64).to_le_bytes().to_vec());
        let grad = self.send_tensor(&g2, TensorTag::train(step, Slot::Cut2Gradient))?;
        Ok((vec![report, grad], loss))
    }

    /// Completes the backward pass through the input adapter.
    pub fn on_train_gradient(&mut self, msg: &ProtocolMessage) -> Result<()> {
        self.seq.accept(self.cfg.session_id, msg, Direction::ServerToClient)?;
        let p = self
            .pending
            .take()
            .ok_or_else(|| ProtocolError::Unexpected("gradient without a step in flight".into()))?;
        let g1 = expect_tag(msg, TensorTag::train(p.step, Slot::Cut1Gradient))?;
        let (tape, bound, out, dcor) = p
            .tape
            .ok_or_else(|| ProtocolError::Invariant("gradient for a frozen input adapter".into()))?;
        let mut seeds = vec![(out, g1.into_data())];
        if let Some(d) = dcor {
            seeds.push((d, vec![self.cfg.decorrelation.lambda]));
        }
        let grads = tape.backward_seeded(&seeds)?;
        let m = self.model_mut()?;
        let adam = m.opt.adam;
        if let Some(st) = m.opt.input.as_mut() {
            update(&mut m.input, &grads, &bound, st, &adam)?;
        }
        Ok(())
    }

    /// One fully local step against the emulator (Offline).
    pub fn train_local(&mut self, batch: &LabeledBatch) -> Result<StepLoss> {
        let dcfg = self.cfg.decorrelation;
        let m = self.model_mut()?;
        let emu = m
            .emulator
            .as_mut()
            .ok_or_else(|| ProtocolError::Invariant("local training needs an emulator".into()))?;
        Ok(train_step(
            &mut m.input,
            &mut emu.stack,
            &mut m.output,
            &mut m.opt,
            batch,
            &dcfg,
        )?)
    }

    pub fn begin_inference(&mut self, index: u32, tokens: &TokenBatch) -> Result<ProtocolMessage> {
        if self.pending_inference.is_some() || self.pending.is_some() {
            return Err(ProtocolError::Unexpected(
                "inference while another exchange is in flight".into(),
            ));
        }
        let m = self.model()?;
        let mut tape = Tape::new();
        let bound = m.input.bind(&mut tape, false)?;
        let f = m.input.forward(&mut tape, &bound, tokens)?;
        let a1 = tape.value(f.out).clone();
        let msg = self.send_tensor(&a1, TensorTag::inference(index, Slot::Cut1Activation))?;
        self.pending_inference = Some(index);
        Ok(msg)
    }

    /// Output-adapter logits `[B, T, V]` from the server's backbone output.
    pub fn on_inference_activation(&mut self, msg: &ProtocolMessage) -> Result<Tensor> {
        self.seq.accept(self.cfg.session_id, msg, Direction::ServerToClient)?;
        let index = self
            .pending_inference
            .take()
            .ok_or_else(|| ProtocolError::Unexpected("inference reply without request".into()))?;
        let a2 = expect_tag(msg, TensorTag::inference(index, Slot::Cut2Activation))?;
        let m = self.model()?;
        let mut tape = Tape::new();
        let bound = m.output.bind(&mut tape, false)?;
        let x = tape.constant(a2)?;
        let logits = m.output.forward(&mut tape, &bound, x)?;
        Ok(tape.value(logits).clone())
    }

    /// Local predictions through the emulator instead of the backbone.
    pub fn predict_with_emulator(&self, tokens: &TokenBatch) -> Result<Vec<u32>> {
        let m = self.model()?;
        let emu = m
            .emulator
            .as_ref()
            .ok_or_else(|| ProtocolError::Unexpected("no emulator on this client".into()))?;
        Ok(predict_last(&m.input, &emu.stack, &m.output, tokens)?)
    }
}
