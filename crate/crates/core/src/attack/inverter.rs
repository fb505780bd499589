use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::model::{InputAdapter, Params, TokenBatch};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::Tensor;

use super::{AttackConfig, AttackError, Result};

const TRAIN_ROWS: usize = 256;

/// Two-layer perceptron mapping one cut-point activation row to token
/// logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Inverter {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Inverter {
    fn init(d: usize, hidden: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut draw = |rows: usize, cols: usize| {
            let n = Normal::new(0.0f32, (1.0 / rows as f32).sqrt()).expect("positive std");
            let data = (0..rows * cols).map(|_| n.sample(rng)).collect();
            Tensor::new(vec![rows, cols], data).expect("finite init")
        };
        let w1 = draw(d, hidden);
        let w2 = draw(hidden, vocab);
        Self {
            w1,
            b1: Tensor::zeros(&[hidden]),
            w2,
            b2: Tensor::zeros(&[vocab]),
        }
    }

    pub fn vocab(&self) -> usize {
        self.w2.shape()[1]
    }

    /// Logits `[rows, V]` for activations `[.., D]`.
    pub fn logits(&self, activations: &Tensor) -> Result<Tensor> {
        let d = self.w1.shape()[0];
        if activations.shape().last() != Some(&d) {
            return Err(AttackError::Contract(format!(
                "activation shape {:?} does not end in {d}",
                activations.shape()
            )));
        }
        let rows = activations.numel() / d;
        let mut tape = Tape::new();
        let x = tape.constant(activations.reshaped(&[rows, d])?)?;
        let (out, _) = self.forward(&mut tape, x, false)?;
        Ok(tape.value(out).clone())
    }

    fn forward(&self, tape: &mut Tape, x: Var, trainable: bool) -> Result<(Var, [Var; 4])> {
        let mut bound = [x; 4];
        for (slot, t) in bound.iter_mut().zip([&self.w1, &self.b1, &self.w2, &self.b2]) {
            *slot = if trainable {
                tape.param(t.clone())?
            } else {
                tape.constant(t.clone())?
            };
        }
        let [w1, b1, w2, b2] = bound;
        let h = tape.matmul(x, w1)?;
        let h = tape.add(h, b1)?;
        let h = tape.gelu(h)?;
        let o = tape.matmul(h, w2)?;
        Ok((tape.add(o, b2)?, bound))
    }

    /// Most likely token per position of activations `[B, T, D]`.
    pub fn decode(&self, activations: &Tensor) -> Result<TokenBatch> {
        let s = activations.shape();
        if s.len() != 3 {
            return Err(AttackError::Contract(format!("expected [B, T, D], got {s:?}")));
        }
        let logits = self.logits(activations)?;
        let v = self.vocab();
        let ids = logits
            .data()
            .chunks(v)
            .map(|r| crate::model::train::argmax(r) as u32)
            .collect();
        Ok(TokenBatch::new(s[0], s[1], ids)?)
    }

    /// The `k` highest-scoring tokens per row, best first.
    pub fn top_k(&self, activations: &Tensor, k: usize) -> Result<Vec<Vec<u32>>> {
        let logits = self.logits(activations)?;
        let k = k.min(self.vocab());
        Ok(logits
            .data()
            .chunks(self.vocab())
            .map(|r| {
                let mut idx: Vec<u32> = (0..r.len() as u32).collect();
                idx.sort_by(|&a, &b| r[b as usize].total_cmp(&r[a as usize]).then(a.cmp(&b)));
                idx.truncate(k);
                idx
            })
            .collect())
    }
}

/// Fits an inverter on activations of `corpus` under `adapter`.
pub fn train_inverter(adapter: &InputAdapter, corpus: &[TokenBatch], cfg: &AttackConfig) -> Result<Inverter> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(AttackError::Contract("empty auxiliary corpus".into()));
    }
    let d = adapter.tok_emb.shape()[1];
    let vocab = adapter.tok_emb.shape()[0];
    let mut xs: Vec<f32> = Vec::new();
    let mut ys: Vec<usize> = Vec::new();
    for batch in corpus {
        let mut tape = Tape::new();
        let bound = adapter.bind(&mut tape, false)?;
        let f = adapter.forward(&mut tape, &bound, batch)?;
        xs.extend_from_slice(tape.value(f.out).data());
        ys.extend(batch.ids.iter().map(|&i| i as usize));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut inv = Inverter::init(d, cfg.inverter_hidden, vocab, &mut rng);
    let mut state = AdamState::new([&inv.w1, &inv.b1, &inv.w2, &inv.b2]);
    let adam = AdamConfig {
        lr: cfg.inverter_lr,
        ..AdamConfig::default()
    };
    let mut order: Vec<usize> = (0..ys.len()).collect();
    let mut cursor = order.len();
    for _ in 0..cfg.inverter_steps {
        let mut rows = Vec::with_capacity(TRAIN_ROWS);
        while rows.len() < TRAIN_ROWS.min(order.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            rows.push(order[cursor]);
            cursor += 1;
        }
        let mut bx = Vec::with_capacity(rows.len() * d);
        for &r in &rows {
            bx.extend_from_slice(&xs[r * d..(r + 1) * d]);
        }
        let by: Vec<usize> = rows.iter().map(|&r| ys[r]).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![rows.len(), d], bx)?)?;
        let (logits, bound) = inv.forward(&mut tape, x, true)?;
        let loss = tape.cross_entropy(logits, &by)?;
        let grads = tape.backward(loss)?;
        let params = [&mut inv.w1, &mut inv.b1, &mut inv.w2, &mut inv.b2];
        for (p, v) in params.into_iter().zip(bound) {
            p.set_grad(grads.get_or_zeros(v))?;
        }
        adam_step(
            &mut [&mut inv.w1, &mut inv.b1, &mut inv.w2, &mut inv.b2],
            &mut state,
            &adam,
        )?;
    }
    Ok(inv)
}
