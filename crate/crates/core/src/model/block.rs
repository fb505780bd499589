use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::tensor::{Result, Tensor};

use super::ModelConfig;

pub(crate) const WEIGHT_STD: f32 = 0.02;

pub(crate) fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f32) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("positive std");
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Pre-norm transformer layer: causal multi-head self-attention followed by
/// a GELU MLP, each wrapped in a residual connection.
///
/// Attention projections are stored per head so that heads can be formed
/// with plain matmuls.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Block {
    pub(crate) fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let f = cfg.mlp_dim();
        // residual-branch output projections are scaled down with depth
        let proj_std = WEIGHT_STD / (2.0 * cfg.n_layers_total as f32).sqrt();
        let mut wq = Vec::with_capacity(cfg.n_heads);
        let mut wk = Vec::with_capacity(cfg.n_heads);
        let mut wv = Vec::with_capacity(cfg.n_heads);
        for _ in 0..cfg.n_heads {
            wq.push(normal_tensor(rng, &[d, dh], WEIGHT_STD));
            wk.push(normal_tensor(rng, &[d, dh], WEIGHT_STD));
            wv.push(normal_tensor(rng, &[d, dh], WEIGHT_STD));
        }
        Self {
            ln1_g: Tensor::ones(&[d]),
            ln1_b: Tensor::zeros(&[d]),
            wq,
            wk,
            wv,
            wo: normal_tensor(rng, &[d, d], proj_std),
            bo: Tensor::zeros(&[d]),
            ln2_g: Tensor::ones(&[d]),
            ln2_b: Tensor::zeros(&[d]),
            w1: normal_tensor(rng, &[d, f], WEIGHT_STD),
            b1: Tensor::zeros(&[f]),
            w2: normal_tensor(rng, &[f, d], proj_std),
            b2: Tensor::zeros(&[d]),
        }
    }

    /// Zero-valued layer with the right shapes, used as a load target.
    pub(crate) fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let f = cfg.mlp_dim();
        Self {
            ln1_g: Tensor::zeros(&[d]),
            ln1_b: Tensor::zeros(&[d]),
            wq: vec![Tensor::zeros(&[d, dh]); cfg.n_heads],
            wk: vec![Tensor::zeros(&[d, dh]); cfg.n_heads],
            wv: vec![Tensor::zeros(&[d, dh]); cfg.n_heads],
            wo: Tensor::zeros(&[d, d]),
            bo: Tensor::zeros(&[d]),
            ln2_g: Tensor::zeros(&[d]),
            ln2_b: Tensor::zeros(&[d]),
            w1: Tensor::zeros(&[d, f]),
            b1: Tensor::zeros(&[f]),
            w2: Tensor::zeros(&[f, d]),
            b2: Tensor::zeros(&[d]),
        }
    }

    pub fn n_heads(&self) -> usize {
        self.wq.len()
    }

    /// Number of tensors in [`Block::named`] order.
    pub fn param_count(n_heads: usize) -> usize {
        2 + 3 * n_heads + 8
    }

    /// Parameters in binding order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("ln1.g".to_string(), &self.ln1_g), ("ln1.b".to_string(), &self.ln1_b)];
        for h in 0..self.n_heads() {
            out.push((format!("attn.h{h}.q"), &self.wq[h]));
            out.push((format!("attn.h{h}.k"), &self.wk[h]));
            out.push((format!("attn.h{h}.v"), &self.wv[h]));
        }
        out.extend([
            ("attn.o.w".to_string(), &self.wo),
            ("attn.o.b".to_string(), &self.bo),
            ("ln2.g".to_string(), &self.ln2_g),
            ("ln2.b".to_string(), &self.ln2_b),
            ("mlp.1.w".to_string(), &self.w1),
            ("mlp.1.b".to_string(), &self.b1),
            ("mlp.2.w".to_string(), &self.w2),
            ("mlp.2.b".to_string(), &self.b2),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.ln1_g, &mut self.ln1_b];
        for ((q, k), v) in self.wq.iter_mut().zip(self.wk.iter_mut()).zip(self.wv.iter_mut()) {
            out.push(q);
            out.push(k);
            out.push(v);
        }
        out.extend([
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]);
        out
    }

    /// Applies the layer to `x[B, T, D]` using vars bound in [`Block::named`]
    /// order. `mask` is the additive causal mask `[T, T]`.
    pub(crate) fn forward(tape: &mut Tape, vars: &[Var], n_heads: usize, x: Var, mask: Var) -> Result<Var> {
        let dh = tape.shape(vars[2])[1];
        let inv_sqrt = 1.0 / (dh as f32).sqrt();
        let h = tape.layer_norm(x, vars[0], vars[1])?;
        let mut heads = Vec::with_capacity(n_heads);
        for i in 0..n_heads {
            let q = tape.matmul(h, vars[2 + 3 * i])?;
            let k = tape.matmul(h, vars[3 + 3 * i])?;
            let v = tape.matmul(h, vars[4 + 3 * i])?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, inv_sqrt)?;
            let scores = tape.add(scores, mask)?;
            let p = tape.softmax(scores, 2)?;
            heads.push(tape.matmul(p, v)?);
        }
        let base = 2 + 3 * n_heads;
        let cat = tape.concat(&heads)?;
        let a = tape.matmul(cat, vars[base])?;
        let a = tape.add(a, vars[base + 1])?;
        let x = tape.add(x, a)?;
        let h2 = tape.layer_norm(x, vars[base + 2], vars[base + 3])?;
        let m = tape.matmul(h2, vars[base + 4])?;
        let m = tape.add(m, vars[base + 5])?;
        let m = tape.gelu(m)?;
        let m = tape.matmul(m, vars[base + 6])?;
        let m = tape.add(m, vars[base + 7])?;
        tape.add(x, m)
    }
}

/// Additive causal mask: 0 on and below the diagonal, a large negative value
/// above it.
pub(crate) fn causal_mask(seq: usize) -> Tensor {
    let mut t = Tensor::zeros(&[seq, seq]);
    let d = t.data_mut();
    for i in 0..seq {
        for j in i + 1..seq {
            d[i * seq + j] = -1e9;
        }
    }
    t
}
