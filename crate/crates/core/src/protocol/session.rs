//! Drives both endpoints over an in-process ordered channel and records the
//! transcript.

use crate::model::train::StepLoss;
use crate::model::{LabeledBatch, ModelPartition, TokenBatch};
use crate::tensor::Tensor;

use super::account::{account, CommReport};
use super::endpoint::{Client, Server};
use super::message::{MessageKind, ProtocolMessage};
use super::{Architecture, ProtocolConfig, ProtocolError, Result};

/// Outcome of one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u32,
    pub loss: StepLoss,
    /// Messages exchanged during the step.
    pub messages: usize,
    /// Payload bytes exchanged during the step.
    pub bytes: u64,
}

pub struct Session {
    cfg: ProtocolConfig,
    client: Client,
    server: Server,
    transcript: Vec<ProtocolMessage>,
}

impl Session {
    /// Opens a session in which the server owns `pretrained` and ships the
    /// client its share.
    pub fn open(cfg: ProtocolConfig, pretrained: &ModelPartition) -> Result<Self> {
        Self::open_with(cfg, pretrained, |_| {})
    }

    /// Like [`Session::open`], letting the caller configure the server first.
    pub fn open_with(
        cfg: ProtocolConfig,
        pretrained: &ModelPartition,
        setup: impl FnOnce(&mut Server),
    ) -> Result<Self> {
        let mut server = Server::new(cfg.clone(), pretrained)?;
        setup(&mut server);
        let mut s = Self {
            client: Client::new(cfg.clone(), pretrained.config.clone()),
            server,
            cfg,
            transcript: Vec::new(),
        };
        let open = s.client.open();
        for reply in s.send_to_server(open)? {
            s.client.on_transfer(&reply)?;
        }
        Ok(s)
    }

    /// Sends one message through the channel: it is serialized, recorded
    /// and parsed back on the receiving side.
    fn carry(&mut self, msg: ProtocolMessage) -> Result<ProtocolMessage> {
        let delivered = ProtocolMessage::decode(&msg.encode())?;
        self.transcript.push(msg);
        Ok(delivered)
    }

    fn send_to_server(&mut self, msg: ProtocolMessage) -> Result<Vec<ProtocolMessage>> {
        let delivered = self.carry(msg)?;
        let replies = self.server.handle(&delivered)?;
        replies.into_iter().map(|r| self.carry(r)).collect()
    }

    fn one_reply(replies: Vec<ProtocolMessage>) -> Result<ProtocolMessage> {
        let n = replies.len();
        let mut it = replies.into_iter();
        match (it.next(), n) {
            (Some(m), 1) => Ok(m),
            _ => Err(ProtocolError::Unexpected(format!("expected one reply, got {n}"))),
        }
    }

    pub fn train_step(&mut self, step: u32, batch: &LabeledBatch) -> Result<StepRecord> {
        let before = self.transcript.len();
        let loss = match self.cfg.architecture {
            Architecture::Offline => self.client.train_local(batch)?,
            Architecture::Online | Architecture::Gradfree => {
                let a1 = self.client.begin_train_step(step, batch)?;
                let a2 = Self::one_reply(self.send_to_server(a1)?)?;
                let (outgoing, loss) = self.client.on_train_activation(&a2, batch)?;
                for m in outgoing {
                    for reply in self.send_to_server(m)? {
                        self.client.on_train_gradient(&reply)?;
                    }
                }
                loss
            }
        };
        let new = &self.transcript[before..];
        Ok(StepRecord {
            step,
            loss,
            messages: new.len(),
            bytes: new.iter().map(ProtocolMessage::payload_byte_len).sum(),
        })
    }

    /// Split inference through the full server backbone. Returns logits
    /// `[B, T, V]`.
    pub fn infer(&mut self, index: u32, tokens: &TokenBatch) -> Result<Tensor> {
        let a1 = self.client.begin_inference(index, tokens)?;
        let a2 = Self::one_reply(self.send_to_server(a1)?)?;
        self.client.on_inference_activation(&a2)
    }

    pub fn close(&mut self) -> Result<CommReport> {
        let close = self.client.close();
        let replies = self.send_to_server(close)?;
        if !replies.is_empty() {
            return Err(ProtocolError::Unexpected("reply to close".into()));
        }
        account(&self.transcript)
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.cfg
    }

    pub fn client(&self) -> &Client {
        &self.client
    }

    pub fn server(&self) -> &Server {
        &self.server
    }

    pub fn transcript(&self) -> &[ProtocolMessage] {
        &self.transcript
    }

    pub fn into_parts(self) -> (Client, Server, Vec<ProtocolMessage>) {
        (self.client, self.server, self.transcript)
    }

    /// Number of tensor-bearing messages in the transcript.
    pub fn tensor_messages(&self) -> usize {
        self.transcript
            .iter()
            .filter(|m| matches!(m.kind, MessageKind::ActivationFrame | MessageKind::GradientFrame))
            .count()
    }
}
